//! Over the whole discrete boundary space, the energy sup problem is half
//! the surface sup problem: both are the largest eigenvalue of the same
//! Neumann-to-Dirichlet difference.
//!
//! ```text
//! cargo run --release --example me_ms_identity [n]
//! ```

use effective_diffusion::experiments::CoefficientSpec;
use effective_diffusion::identify::me_ms_identity_check;
use effective_diffusion::mesh::build_unit_square_mesh;
use effective_diffusion::SymMat;

fn main() -> effective_diffusion::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(48);
    let field = CoefficientSpec::PeriodicPaper.field(0.2, 0)?;
    let mesh = build_unit_square_mesh(n)?;
    for abar in [SymMat::new(19.3, 0.0, 11.8), SymMat::new(10.0, 2.0, 5.0), SymMat::scalar(30.0)] {
        let c = me_ms_identity_check(&field, abar, &mesh)?;
        println!("Ā = {abar}: ψ_ME = {:.6e}, ψ_MS = {:.6e}, ratio {:.10}", c.psi_me, c.psi_ms, c.psi_ms / c.psi_me);
    }
    Ok(())
}
