//! Identification from externally supplied energies, without any fine-mesh
//! simulation. The measurement file is written here from a known constant
//! matrix and then read back as if it came from an experiment.
//!
//! ```text
//! cargo run --release --example injected_measurements
//! ```

use std::sync::Arc;

use effective_diffusion::identify::{descend, CoarseModel, DescentOptions, EnergyObjective, EnergyObjectiveKind, Measurements};
use effective_diffusion::mesh::build_unit_square_mesh;
use effective_diffusion::modes::compute_r_modes;
use effective_diffusion::SymMat;

fn main() -> effective_diffusion::Result<()> {
    let coarse = Arc::new(build_unit_square_mesh(29)?);
    let basis = compute_r_modes(&coarse, 3)?;
    let model = CoarseModel::new(coarse, basis.clone())?;

    let truth = SymMat::new(6.0, 0.8, 4.0);
    let text = model.synthetic_measurements(truth)?.to_toml();
    println!("measurement file:\n{text}");

    let meas = Measurements::from_toml(&text, &basis)?;
    let obj = EnergyObjective::new(&model, &meas, EnergyObjectiveKind::PsiSigma)?;
    let t = descend(&obj, &SymMat::new(7.0, 0.0, 5.0).to_vec(), &DescentOptions::default())?;
    println!("identified {} after {} iterations ({:?})", t.final_matrix(), t.iterations(), t.termination);
    println!("true       {truth}");
    Ok(())
}
