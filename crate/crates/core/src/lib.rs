//! Identification of constant effective diffusion matrices from boundary
//! energy measurements of highly oscillatory diffusion problems.

pub mod coefficients;
pub mod config;
pub mod eigen;
pub mod error;
pub mod experiments;
pub mod homogenization;
pub mod identify;
pub mod mesh;
pub mod modes;
pub mod solver;
pub mod sparse;

pub use coefficients::{CoefficientField, SymMat};
pub use error::{Error, Result};
pub use mesh::TriMesh;
