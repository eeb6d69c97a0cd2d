//! One-dimensional energy misfit `ā ↦ ¼|∫ 1/a_ε − 1/ā|` over a grid: not
//! convex, yet minimized at the harmonic mean.
//!
//! ```text
//! cargo run --release --example nonconvex_profile > profile.csv
//! ```

use effective_diffusion::experiments::{argmin, grid, one_d_profile};

fn main() -> effective_diffusion::Result<()> {
    let eps = 0.1;
    let a = |y: f64| 2.0 + (2.0 * std::f64::consts::PI * y / eps).cos();
    let profile = one_d_profile(a, &grid(0.2, 6.0, 0.01), 640)?;
    println!("abar,psi");
    for (abar, psi) in &profile {
        println!("{abar},{psi}");
    }
    if let Some((amin, vmin)) = argmin(&profile) {
        eprintln!("argmin {amin:.3} (√3 = {:.3}), minimum {vmin:.2e}", 3f64.sqrt());
    }
    Ok(())
}
