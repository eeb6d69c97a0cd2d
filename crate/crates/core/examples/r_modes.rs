//! Leading eigenmodes of the Laplace Neumann-to-Dirichlet map on the unit
//! square, used as boundary data for the identification.
//!
//! ```text
//! cargo run --release --example r_modes [n] [P] > modes.txt
//! ```

use effective_diffusion::mesh::build_unit_square_mesh;
use effective_diffusion::modes::{compute_r_modes, laplace_ntd};

fn main() -> effective_diffusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(29);
    let p: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(11);
    let mesh = build_unit_square_mesh(n)?;
    let basis = compute_r_modes(&mesh, p)?;
    let ntd = laplace_ntd(&mesh)?;
    let space = ntd.space().clone();
    for (k, (m, lam)) in basis.modes.iter().zip(basis.eigenvalues.as_deref().unwrap_or(&[])).enumerate() {
        let rphi = ntd.apply_ntd(&m.values)?;
        eprintln!("λ{} = {lam:.8}  ⟨φ, Rφ⟩ = {:.8}  mean = {:.1e}", k + 1, space.inner(&m.values, &rphi), m.mean(&space));
    }
    // arclength x y φ_1 … φ_P, one boundary node per line
    basis.write_table(&mesh, std::io::stdout().lock()).map_err(effective_diffusion::Error::from)?;
    Ok(())
}
