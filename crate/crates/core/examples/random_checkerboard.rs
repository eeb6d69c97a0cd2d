//! Effective matrix of the random two-phase checkerboard from averaged
//! energies, with a confidence interval over independent batches. The exact
//! homogenized matrix is 8·Id.
//!
//! ```text
//! cargo run --release --example random_checkerboard [epsilon] [M1] [M2]
//! ```

use effective_diffusion::experiments::{
    batch_seeds, err_star, identify_case, CoefficientSpec, EnsembleStat, PipelineOptions, Setup, Strategy,
};
use effective_diffusion::SymMat;

fn main() -> effective_diffusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let eps: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let m1: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let m2: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = CoefficientSpec::Checkerboard;
    let target = SymMat::scalar(8.0);
    let setup = Setup::new(&spec, eps, 3, 3, 10.0, 0.05)?;
    let opts = PipelineOptions { strategies: vec![Strategy::Me], quality: false, ..Default::default() };

    let mut errs = Vec::new();
    for batch in 0..m2 {
        let seeds = batch_seeds(1, batch, m1);
        let id = identify_case(&setup, &spec, target, &seeds, &opts)?.remove(0);
        let e = err_star(id.matrix, target);
        println!("batch {batch} (seeds {}..={}): {}  err_star {e:.4}", seeds[0], seeds[m1 - 1], id.matrix);
        errs.push(e);
    }
    if m2 >= 2 {
        let s = EnsembleStat::from_batches(&errs, m1)?;
        println!("mean err_star {:.4}, 95% CI [{:.4}, {:.4}]", s.mean, s.ci95_low, s.ci95_high);
    }
    Ok(())
}
