//! Identification when the effective coefficient itself is uncertain: the
//! model energy is averaged over random perturbations `Ā + η`.
//!
//! ```text
//! cargo run --release --example noise_coefficient [sigma] [draws]
//! ```

use effective_diffusion::experiments::{noise_coefficient_study, CoefficientSpec, PipelineOptions, SweepSpec};
use effective_diffusion::identify::{descend, DescentOptions, ScalarCoefficientNoiseObjective};

fn main() -> effective_diffusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let sigma: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let draws: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);

    // scalar case: a_* = 8 and η uniform on [2, 4] have a closed-form optimum
    let obj = ScalarCoefficientNoiseObjective::new(8.0, 2.0, 4.0, 32)?;
    let t = descend(&obj, &[8.0], &DescentOptions::default())?;
    let e = 0.25f64.exp();
    println!("1D optimum: descent {:.6}, closed form {:.6}", t.final_point()[0], (4.0 - 2.0 * e) / (e - 1.0));

    let spec = SweepSpec {
        coefficient: CoefficientSpec::PeriodicPaper,
        epsilons: vec![],
        p: Some(3),
        q: 3,
        r: 10.0,
        coarse_h: 0.05,
        m1: draws,
        m2: 1,
        base_seed: 1,
        cell_n: 128,
    };
    let s = noise_coefficient_study(&spec, 0.1, sigma, draws, &PipelineOptions::default())?;
    println!("noiseless Ā = {}", s.noiseless);
    println!("noisy Ā_σ  = {}  (σ = {sigma}, {draws} draws, {} rejected)", s.noisy, s.rejected);
    println!("relative difference {:.4}", s.relative_difference);
    Ok(())
}
