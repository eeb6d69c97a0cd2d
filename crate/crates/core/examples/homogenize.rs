//! Homogenized matrices of the built-in coefficient families.
//!
//! ```text
//! cargo run --release --example homogenize [cell_n]
//! ```

use effective_diffusion::experiments::CoefficientSpec;
use effective_diffusion::homogenization::harmonic_mean_1d;

fn main() -> effective_diffusion::Result<()> {
    let cell_n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(256);
    let families = [
        ("periodic", CoefficientSpec::PeriodicPaper),
        ("layered", CoefficientSpec::Layered { base: 2.0, amplitude: 1.0 }),
        ("constant", CoefficientSpec::Constant { a11: 3.0, a12: 0.5, a22: 2.0 }),
        ("checkerboard", CoefficientSpec::Checkerboard),
    ];
    for (name, spec) in families {
        let h = spec.reference(cell_n)?;
        println!("{name:>12}: {}  ({:?})", h.matrix, h.provenance);
    }
    // layered media: the cross-layer entry is the harmonic mean
    let a = |y: f64| 2.0 + (2.0 * std::f64::consts::PI * y).cos();
    println!("harmonic mean of 2 + cos 2πy: {:.12} (√3 = {:.12})", harmonic_mean_1d(a, 4096)?, 3f64.sqrt());
    Ok(())
}
