//! Identify a constant matrix from boundary energies of the periodic field
//! and compare it with the homogenized matrix.
//!
//! ```text
//! cargo run --release --example identify_periodic [epsilon] [r]
//! ```

use effective_diffusion::experiments::{err_star, identify_case, CoefficientSpec, PipelineOptions, Setup, Strategy};
use effective_diffusion::modes::choose_p;

fn main() -> effective_diffusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let eps: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let r: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let spec = CoefficientSpec::PeriodicPaper;
    let reference = spec.reference(256)?.matrix;
    let p = choose_p(eps);
    let setup = Setup::new(&spec, eps, p, 11, r, 0.05)?;
    println!("ε = {eps}, P = {p}, coarse n = {}, fine n = {}", setup.coarse.n, setup.fine.n);
    println!("A* = {reference}");

    let opts = PipelineOptions {
        strategies: vec![Strategy::Me, Strategy::Ms, Strategy::AStar],
        ..Default::default()
    };
    for id in identify_case(&setup, &spec, reference, &[], &opts)? {
        let iters = id.trace.as_ref().map_or(String::from("-"), |t| t.iterations().to_string());
        println!(
            "{:>6}: {}  err_star {:.4}  Err_ε,Q {:.4}  iterations {iters}",
            id.strategy.tag(),
            id.matrix,
            err_star(id.matrix, reference),
            id.quality.map_or(f64::NAN, |q| q.value),
        );
    }
    Ok(())
}
