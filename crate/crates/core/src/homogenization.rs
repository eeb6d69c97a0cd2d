//! Reference homogenized matrices.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, SymMat, CHECKERBOARD_PHASES};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::solver::solve_correctors;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    CorrectorFem { cell_n: usize },
    Analytic1d,
    CheckerboardExact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedReference {
    pub matrix: SymMat,
    pub provenance: Provenance,
}

/// Corrector-based homogenized matrix
/// `[A*]_ij = ∫_Q (e_i + ∇w_i)ᵀ A (e_j + ∇w_j)`, with the same barycenter
/// quadrature as the stiffness assembly.
pub fn homogenized_matrix(cell_mesh: &TriMesh, field: &CoefficientField) -> Result<HomogenizedReference> {
    let w = solve_correctors(cell_mesh, field, &[[1.0, 0.0], [0.0, 1.0]])?;
    let (w1, w2) = (w[0].nodal(cell_mesh), w[1].nodal(cell_mesh));
    let mut acc = [0.0; 3];
    for (t, tri) in cell_mesh.triangles.iter().enumerate() {
        let (grads, area) = cell_mesh.shape_gradients(t);
        let a = field.eval(cell_mesh.barycenter(t));
        let mut g1 = [1.0, 0.0];
        let mut g2 = [0.0, 1.0];
        for (k, &node) in tri.iter().enumerate() {
            for d in 0..2 {
                g1[d] += w1[node] * grads[k][d];
                g2[d] += w2[node] * grads[k][d];
            }
        }
        acc[0] += area * a.form(g1, g1);
        acc[1] += area * 0.5 * (a.form(g1, g2) + a.form(g2, g1));
        acc[2] += area * a.form(g2, g2);
    }
    Ok(HomogenizedReference {
        matrix: SymMat::from_vec(acc),
        provenance: Provenance::CorrectorFem { cell_n: cell_mesh.n },
    })
}

/// `(∫₀¹ 1/a)⁻¹` by the composite midpoint rule.
pub fn harmonic_mean_1d(a: impl Fn(f64) -> f64, points: usize) -> Result<f64> {
    if points == 0 {
        return Err(Error::invalid("quadrature needs at least one point"));
    }
    let h = 1.0 / points as f64;
    let mut s = 0.0;
    for k in 0..points {
        let v = a((k as f64 + 0.5) * h);
        if !(v > 0.0) {
            return Err(Error::invalid(format!("coefficient not coercive: a = {v}")));
        }
        s += h / v;
    }
    Ok(1.0 / s)
}

/// The two-phase checkerboard's homogenized matrix `√(4·16)·Id = 8·Id`.
pub fn checkerboard_exact() -> HomogenizedReference {
    let g = (CHECKERBOARD_PHASES[0] * CHECKERBOARD_PHASES[1]).sqrt();
    HomogenizedReference { matrix: SymMat::scalar(g), provenance: Provenance::CheckerboardExact }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_periodic_cell_mesh;

    #[test]
    fn harmonic_means() {
        assert_eq!(harmonic_mean_1d(|_| 3.5, 7).unwrap(), 3.5);
        let h = harmonic_mean_1d(|y| 2.0 + (2.0 * std::f64::consts::PI * y).cos(), 10_000).unwrap();
        assert!((h - 3f64.sqrt()).abs() < 1e-8);
        let two = harmonic_mean_1d(|y| if y < 0.5 { 4.0 } else { 16.0 }, 1000).unwrap();
        assert!((two - 6.4).abs() < 1e-12);
        assert!(harmonic_mean_1d(|y| y - 0.5, 10).is_err());
    }

    #[test]
    fn checkerboard_reference() {
        let r = checkerboard_exact();
        assert_eq!(r.matrix, SymMat::diag(8.0, 8.0));
        assert!(r.matrix.in_region(4.0, 16.0));
    }

    #[test]
    fn layered_field_matches_means() {
        let cell = build_periodic_cell_mesh(128).unwrap();
        let f = CoefficientField::Layered { base: 2.0, amplitude: 1.0 };
        let a = homogenized_matrix(&cell, &f).unwrap().matrix;
        assert!((a.a11 - 2.0).abs() < 2e-3, "{a}");
        assert!((a.a22 - 3f64.sqrt()).abs() < 2e-3, "{a}");
        assert!(a.a12.abs() < 1e-10);
    }

    #[test]
    fn constants_are_reproduced() {
        let cell = build_periodic_cell_mesh(6).unwrap();
        let m = SymMat::new(5.0, -1.5, 2.5);
        let a = homogenized_matrix(&cell, &CoefficientField::constant(m)).unwrap().matrix;
        assert!(a.sub(m).entry_norm() < 1e-10);
    }
}
