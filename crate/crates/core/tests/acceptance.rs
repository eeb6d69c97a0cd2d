//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! A failing criterion is reported, not hidden; set `ACCEPTANCE_STRICT=1`
//! to turn any FAIL into a nonzero exit status. Every criterion uses
//! `base_seed = 1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use effective_diffusion::config::{self, random_spd, Overrides};
use effective_diffusion::experiments::{
    argmin, batch_seeds, err_star, grid, identify_case, log_log_slope, noise_coefficient_study,
    noise_measurement_study, one_d_profile, CoefficientSpec, Identified, PipelineOptions, Setup, Strategy,
    SweepSpec,
};
use effective_diffusion::homogenization::{harmonic_mean_1d, homogenized_matrix};
use effective_diffusion::identify::{
    assemble_m, central_difference, descend, me_ms_identity_check, CoarseModel, DescentOptions, EnergyObjective,
    EnergyObjectiveKind, Objective, OptimizerTrace, ScalarCoefficientNoiseObjective,
};
use effective_diffusion::mesh::{build_periodic_cell_mesh, build_unit_square_mesh};
use effective_diffusion::modes::{canonicalize, compute_r_modes, laplace_ntd};
use effective_diffusion::solver::BoundarySpace;
use effective_diffusion::{CoefficientField, SymMat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

const SEED: u64 = 1;
const COARSE_H: f64 = 0.05;

type Outcome = Result<(bool, String), String>;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n
}

fn periodic_spec(p: usize) -> SweepSpec {
    SweepSpec {
        coefficient: CoefficientSpec::PeriodicPaper,
        epsilons: vec![],
        p: Some(p),
        q: p,
        r: 20.0,
        coarse_h: COARSE_H,
        m1: 10,
        m2: 1,
        base_seed: SEED,
        cell_n: 512,
    }
}

fn c1() -> Outcome {
    let h = CoefficientSpec::PeriodicPaper.reference(512).map_err(|e| e.to_string())?.matrix;
    let ok = (19.24..=19.43).contains(&h.a11) && (11.77..=11.89).contains(&h.a22) && h.a12.abs() <= 5e-3;
    Ok((ok, format!("A* = [{:.4}, {:.2e}, {:.4}]", h.a11, h.a12, h.a22)))
}

fn c2() -> Outcome {
    let mesh = build_periodic_cell_mesh(8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = random_spd(&mut rng, 0.5, 30.0);
        let h = homogenized_matrix(&mesh, &CoefficientField::constant(m)).map_err(|e| e.to_string())?.matrix;
        worst = worst.max(h.sub(m).to_vec().iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    Ok((worst <= 1e-10, format!("max entry deviation {worst:.1e} over 20 matrices")))
}

fn c3() -> Outcome {
    let a = |y: f64| 2.0 + (2.0 * std::f64::consts::PI * y).cos();
    let h = harmonic_mean_1d(a, 4096).map_err(|e| e.to_string())?;
    let eps = 0.1;
    let prof = one_d_profile(|y| a(y / eps), &grid(1.0, 3.0, 1e-3), 640).map_err(|e| e.to_string())?;
    let (amin, _) = argmin(&prof).ok_or("empty profile")?;
    let s3 = 3f64.sqrt();
    let ok = (h - s3).abs() <= 1e-8 && (amin - s3).abs() <= 2e-3;
    Ok((ok, format!("harmonic mean - √3 = {:.1e}, profile argmin {amin:.3}", h - s3)))
}

/// Periodic identification at P = 3, r = 20 with `Err_{ε,Q}`, Q = 11.
fn periodic_runs() -> &'static [(f64, Vec<Identified>)] {
    static CELL: std::sync::OnceLock<Vec<(f64, Vec<Identified>)>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let spec = CoefficientSpec::PeriodicPaper;
        let reference = spec.reference(512).expect("reference").matrix;
        let opts = PipelineOptions { strategies: vec![Strategy::Me, Strategy::AStar], ..Default::default() };
        [0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| {
                let setup = Setup::new(&spec, eps, 3, 11, 20.0, COARSE_H).expect("setup");
                (eps, identify_case(&setup, &spec, reference, &[], &opts).expect("identify"))
            })
            .collect()
    })
}

fn c4() -> Outcome {
    let reference = CoefficientSpec::PeriodicPaper.reference(512).map_err(|e| e.to_string())?.matrix;
    let runs = periodic_runs();
    let eps: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let errs: Vec<f64> = runs.iter().map(|(_, ids)| err_star(ids[0].matrix, reference)).collect();
    let slope = log_log_slope(&eps, &errs);
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let ok = monotone && errs[2] <= 0.01 && (1.5..=2.6).contains(&slope);
    // diagnostic only: distance to what the same meshes identify from the
    // constant field A*, which removes the coarse discretization bias
    let constant = CoefficientSpec::Constant { a11: reference.a11, a12: reference.a12, a22: reference.a22 };
    let opts = PipelineOptions { strategies: vec![Strategy::Me], ..Default::default() };
    let mut debiased = Vec::new();
    for (eps, ids) in runs {
        let setup = Setup::new(&CoefficientSpec::PeriodicPaper, *eps, 3, 11, 20.0, COARSE_H).map_err(|e| e.to_string())?;
        let image = identify_case(&setup, &constant, reference, &[], &opts).map_err(|e| e.to_string())?[0].matrix;
        debiased.push(err_star(ids[0].matrix, image));
    }
    Ok((
        ok,
        format!(
            "err_star at ε = 0.2/0.1/0.05: {:.4}/{:.4}/{:.4}, slope {slope:.2}; against the discrete image of A*: {:.4}/{:.4}/{:.4}, slope {:.2}",
            errs[0],
            errs[1],
            errs[2],
            debiased[0],
            debiased[1],
            debiased[2],
            log_log_slope(&eps, &debiased)
        ),
    ))
}

fn c5() -> Outcome {
    let runs = periodic_runs();
    let q = |i: usize, s: usize| runs[i].1[s].quality.map(|q| q.value).ok_or("missing quality");
    let me_fine = q(2, 0)?;
    let (me_coarse, star_coarse) = (q(0, 0)?, q(0, 1)?);
    let ok = me_fine <= 0.10 && star_coarse > me_coarse - 0.02;
    Ok((
        ok,
        format!("ε = 0.05: ME {me_fine:.4}; ε = 0.2: A* {star_coarse:.4} vs ME {me_coarse:.4}"),
    ))
}

fn c6() -> Outcome {
    let field = CoefficientSpec::PeriodicPaper.field(0.2, 0).map_err(|e| e.to_string())?;
    let mesh = build_unit_square_mesh(128).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let abar = random_spd(&mut rng, 2.0, 25.0);
        let c = me_ms_identity_check(&field, abar, &mesh).map_err(|e| e.to_string())?;
        worst = worst.max(rel(c.psi_ms, 2.0 * c.psi_me));
    }
    Ok((worst <= 1e-6, format!("max |ψ_ms - 2ψ_me| / 2ψ_me = {worst:.1e}")))
}

fn c7() -> Outcome {
    let spec = CoefficientSpec::PeriodicPaper;
    let setup = Setup::new(&spec, 0.2, 3, 3, 20.0, COARSE_H).map_err(|e| e.to_string())?;
    let run = setup.fine_run(&spec, &setup.basis, &[]).map_err(|e| e.to_string())?;
    let meas = run.measurements(&setup.basis, 3, false);
    let model = CoarseModel::new(setup.coarse.clone(), setup.basis.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = [0.0f64; 2];
    for (k, kind) in [EnergyObjectiveKind::PsiSigma, EnergyObjectiveKind::PsiMax].into_iter().enumerate() {
        let obj = EnergyObjective::new(&model, &meas, kind).map_err(|e| e.to_string())?;
        let mut taken = 0;
        while taken < 10 {
            let a = random_spd(&mut rng, 6.0, 25.0);
            if kind == EnergyObjectiveKind::PsiMax {
                // keep away from crossings of the two largest |eigenvalues| of M
                let state = model.solve(a).map_err(|e| e.to_string())?;
                let mut ev: Vec<f64> =
                    assemble_m(&state, &meas).m.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
                ev.sort_by(|x, y| y.total_cmp(x));
                if (ev[0] - ev[1]) / ev[0] < 0.05 {
                    continue;
                }
            }
            let x = a.to_vec();
            let (_, g) = obj.value_and_gradient(&x).map_err(|e| e.to_string())?;
            let h = 1e-4 * x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fd = central_difference(&obj, &x, h).map_err(|e| e.to_string())?;
            worst[k] = worst[k].max(vec_rel(&g, &fd));
            taken += 1;
        }
    }
    let ok = worst.iter().all(|&w| w <= 1e-4);
    Ok((ok, format!("max relative gradient error: Ψ^Σ {:.1e}, Ψ_max {:.1e}", worst[0], worst[1])))
}

fn c8(extra: &[&OptimizerTrace]) -> Outcome {
    let coarse = Arc::new(build_unit_square_mesh(29).map_err(|e| e.to_string())?);
    let basis = compute_r_modes(&coarse, 3).map_err(|e| e.to_string())?;
    let model = CoarseModel::new(coarse, basis).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let a0 = random_spd(&mut rng, 2.0, 20.0);
    let meas = model.synthetic_measurements(a0).map_err(|e| e.to_string())?;
    let obj = EnergyObjective::new(&model, &meas, EnergyObjectiveKind::PsiSigma).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut traces = Vec::new();
    for _ in 0..5 {
        let init = random_spd(&mut rng, 1.0, 30.0);
        let t = descend(&obj, &init.to_vec(), &DescentOptions::default()).map_err(|e| e.to_string())?;
        worst = worst.max(err_star(t.final_matrix(), a0));
        traces.push(t);
    }
    let all: Vec<&OptimizerTrace> = traces.iter().chain(extra.iter().copied()).collect();
    let monotone = all.iter().all(|t| t.is_monotone());
    Ok((
        monotone && worst <= 1e-5,
        format!("worst recovery err_star {worst:.1e}; {} traces non-increasing: {monotone}", all.len()),
    ))
}

/// Checkerboard at ε = 0.1, r = 10, P = 3, M₁ = 10 over four batches.
fn checker_runs() -> &'static Vec<Vec<Identified>> {
    static CELL: std::sync::OnceLock<Vec<Vec<Identified>>> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let spec = CoefficientSpec::Checkerboard;
        let setup = Setup::new(&spec, 0.1, 3, 3, 10.0, COARSE_H).expect("setup");
        let opts = PipelineOptions {
            strategies: vec![Strategy::Me, Strategy::Ms],
            quality: false,
            ..Default::default()
        };
        (0..4)
            .map(|b| {
                identify_case(&setup, &spec, SymMat::scalar(8.0), &batch_seeds(SEED, b, 10), &opts).expect("identify")
            })
            .collect()
    })
}

fn c9() -> Outcome {
    let runs = checker_runs();
    let target = SymMat::scalar(8.0);
    let mean = |s: usize| runs.iter().map(|ids| err_star(ids[s].matrix, target)).sum::<f64>() / runs.len() as f64;
    let (me, ms) = (mean(0), mean(1));
    let ok = me <= 0.10 && (me - ms).abs() <= 0.01;
    Ok((ok, format!("mean err_star over {} batches: ME {me:.4}, MS {ms:.4}, |ME - MS| {:.4}", runs.len(), (me - ms).abs())))
}

fn c10() -> Outcome {
    let spec = periodic_spec(3);
    let s = noise_measurement_study(&spec, 0.05, &[0.01, 0.05, 0.1], 40, &PipelineOptions::default())
        .map_err(|e| e.to_string())?;
    let means: Vec<f64> = s.levels.iter().map(|l| l.mean_error).collect();
    let fit = s.fit.ok_or("no fit")?;
    let monotone = means.windows(2).all(|w| w[1] > w[0]);
    let ok = monotone && fit.r_squared >= 0.9 && (1.0..=10.0).contains(&fit.slope);
    Ok((
        ok,
        format!(
            "mean errors {:.4}/{:.4}/{:.4}, slope {:.2}, R² {:.3}",
            means[0], means[1], means[2], fit.slope, fit.r_squared
        ),
    ))
}

fn c11() -> Outcome {
    let obj = ScalarCoefficientNoiseObjective::new(8.0, 2.0, 4.0, 32).map_err(|e| e.to_string())?;
    let t = descend(&obj, &[8.0], &DescentOptions::default()).map_err(|e| e.to_string())?;
    let descent = t.final_point()[0];
    let best = grid(1e-3, 20.0, 1e-4)
        .into_iter()
        .map(|a| (a, (0.125 - obj.expectation(a)).powi(2)))
        .reduce(|b, p| if p.1 < b.1 { p } else { b })
        .ok_or("empty grid")?
        .0;
    let e = 0.25f64.exp();
    let exact = (4.0 - 2.0 * e) / (e - 1.0);
    let one_d = (descent - exact).abs() <= 1e-3 && (best - exact).abs() <= 1e-3;

    let spec = periodic_spec(3);
    let s = noise_coefficient_study(&spec, 0.05, 2.0, 10, &PipelineOptions::default()).map_err(|e| e.to_string())?;
    let spectral = s.noisy.sub(s.noiseless).spectral_norm() / s.noiseless.spectral_norm();
    let two_d = spectral <= 0.08;
    Ok((
        one_d && two_d,
        format!(
            "1D: descent {descent:.5}, grid {best:.4}, exact {exact:.5}; 2D: spectral {spectral:.4}, entry {:.4}, rejected {}",
            s.relative_difference, s.rejected
        ),
    ))
}

fn c12() -> Outcome {
    let mesh = build_unit_square_mesh(16).map_err(|e| e.to_string())?;
    let space = BoundarySpace::new(&mesh);
    let p = 6;
    let basis = compute_r_modes(&mesh, p).map_err(|e| e.to_string())?;
    let (values, vectors) = common::dense_modes(&mesh);
    let (values, vectors) = canonicalize(&mesh, &space, values[..p + 3].to_vec(), vectors[..p + 3].to_vec());
    let lam = basis.eigenvalues.clone().ok_or("no eigenvalues")?;
    let mut dval = 0.0f64;
    let mut dvec = 0.0f64;
    for i in 0..p {
        dval = dval.max((lam[i] - values[i]).abs());
        let diff: Vec<f64> = basis.modes[i].values.iter().zip(&vectors[i]).map(|(a, b)| a - b).collect();
        dvec = dvec.max(space.norm(&diff));
    }
    let ntd = laplace_ntd(&mesh).map_err(|e| e.to_string())?;
    let t: Vec<Vec<f64>> =
        basis.modes.iter().map(|m| ntd.apply_ntd(&m.values)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut asym = 0.0f64;
    let mut min_rq = f64::INFINITY;
    for i in 0..p {
        min_rq = min_rq.min(space.inner(&basis.modes[i].values, &t[i]));
        for j in 0..i {
            asym = asym.max(
                (space.inner(&basis.modes[i].values, &t[j]) - space.inner(&basis.modes[j].values, &t[i])).abs(),
            );
        }
    }
    let ok = dval <= 1e-8 && dvec <= 1e-6 && asym <= 1e-9 && min_rq > 0.0;
    Ok((
        ok,
        format!("eigenvalue gap {dval:.1e}, vector gap {dvec:.1e}, asymmetry {asym:.1e}, min ⟨φ,Rφ⟩ {min_rq:.3}"),
    ))
}

fn strip_wall(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

fn c13() -> Outcome {
    let configs = [
        "schema_version = 1\nexperiment = \"sweep\"\nbase_seed = 1\nepsilons = [0.25, 0.2]\nP = 3\nQ = 5\nr = 6\n\
         strategies = [\"ME\", \"MS\", \"A_star\"]\ncell_n = 64\n[coefficient]\nkind = \"periodic_paper\"\n\
         [output]\nname = \"periodic\"\n",
        "schema_version = 1\nexperiment = \"sweep\"\nbase_seed = 1\nepsilons = [0.25]\nP = 3\nQ = 3\nr = 6\n\
         M1 = 3\nM2 = 2\nstrategies = [\"ME\", \"A_star\"]\n[coefficient]\nkind = \"checkerboard\"\n\
         [output]\nname = \"checker\"\n",
    ];
    let mut rows = 0;
    for text in configs {
        let mut outs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let ov = Overrides { out: Some(dir.path().to_path_buf()), ..Default::default() };
            let res = config::parse(text).and_then(|c| c.resolve(&ov)).map_err(|e| e.to_string())?;
            let name = res.name.clone();
            config::run(&res).map_err(|e| e.to_string())?;
            outs.push(std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).map_err(|e| e.to_string())?);
        }
        if strip_wall(&outs[0]) != strip_wall(&outs[1]) {
            return Ok((false, "CSV differs between identical runs".into()));
        }
        rows += outs[0].lines().count() - 1;
    }
    Ok((true, format!("two sweeps re-run: {rows} rows identical apart from wall_ms")))
}

fn evaluate(f: impl FnOnce() -> Outcome) -> (bool, String, f64) {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(Ok((ok, msg))) => (ok, msg, secs),
        Ok(Err(e)) => (false, format!("error: {e}"), secs),
        Err(_) => (false, "panicked".into(), secs),
    }
}

fn main() {
    let mut results: Vec<(usize, (bool, String, f64))> = Vec::new();
    let criteria: [(usize, fn() -> Outcome); 12] = [
        (1, c1),
        (2, c2),
        (3, c3),
        (4, c4),
        (5, c5),
        (6, c6),
        (7, c7),
        (9, c9),
        (10, c10),
        (11, c11),
        (12, c12),
        (13, c13),
    ];
    for (k, f) in criteria {
        eprintln!("evaluating criterion {k}");
        results.push((k, evaluate(f)));
    }
    // descent traces from the identification runs above join the synthetic ones
    let eight = evaluate(|| {
        let mut extra: Vec<&OptimizerTrace> = Vec::new();
        for (_, ids) in periodic_runs() {
            extra.extend(ids.iter().filter_map(|i| i.trace.as_ref()));
        }
        for ids in checker_runs() {
            extra.extend(ids.iter().filter_map(|i| i.trace.as_ref()));
        }
        c8(&extra)
    });
    results.push((8, eight));
    results.sort_by_key(|r| r.0);

    println!();
    let mut failed = 0;
    for (k, (ok, msg, secs)) in &results {
        failed += usize::from(!ok);
        println!("criterion {k:>2}: {} ({secs:.1} s) {msg}", if *ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
