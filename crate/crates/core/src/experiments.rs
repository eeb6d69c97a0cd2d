//! Error metrics, ensembles over random realizations, ε sweeps and the
//! studies built on them.

use std::f64::consts::SQRT_2;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{
    cells_per_side, mean_over_cell, sample_checkerboard, scale_epsilon, CoefficientField, SymMat,
    DEFAULT_CELL_QUADRATURE,
};
use crate::error::{Error, Result};
use crate::homogenization::{checkerboard_exact, homogenized_matrix, HomogenizedReference};
use crate::identify::{
    apply_measurement_noise, descend, simulate, CoarseModel, CoefficientNoiseObjective, DescentOptions,
    EnergyObjective, EnergyObjectiveKind, FieldNorm, FieldObjective, FineRun, Measurements, Objective,
    OptimizerTrace,
};
use crate::mesh::{build_periodic_cell_mesh, build_unit_square_mesh, lcm, subdivisions_for_size, Transfer, TriMesh};
use crate::modes::{affine_modes, compute_r_modes, prolongate_basis, ModeBasis};
use crate::solver::{BoundaryFunction, NeumannSolver};
use crate::sparse::{dot, SymCsc};

/// Relative error `√(Σ_{i≤j} (Ā − A)_ij² / Σ_{i≤j} A_ij²)`.
pub fn err_star(abar: SymMat, reference: SymMat) -> f64 {
    abar.sub(reference).entry_norm() / reference.entry_norm()
}

/// Value of the worst-case relative volume error over a test space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub value: f64,
    /// The Gram matrix of reference fields needed a ridge to factorize.
    pub ridge: bool,
}

/// Precomputed data for `sup_g ‖u_ε(g) − u(Ā, g)‖ / ‖u_ε(g)‖` over the span
/// of `Q` modes, with `u_ε` (or its mean over realizations) recorded on a
/// fine mesh.
pub struct QualityProbe {
    mesh: Arc<TriMesh>,
    modes: Vec<BoundaryFunction>,
    reference: Vec<Vec<f64>>,
    mass: SymCsc,
    chol: Cholesky<f64, nalgebra::Dyn>,
    ridge: bool,
}

impl QualityProbe {
    pub fn new(transfer: &Transfer, basis: &ModeBasis, run: &FineRun) -> Result<Self> {
        let q = basis.len();
        if run.solutions.len() < q {
            return Err(Error::MissingData(format!("{} recorded fields for {q} test modes", run.solutions.len())));
        }
        let modes = prolongate_basis(basis, transfer).modes;
        let mass = run.mesh.volume_mass_matrix();
        let reference = run.solutions[..q].to_vec();
        let mut n = gram(&reference, &mass);
        let mut ridge = false;
        let chol = match Cholesky::new(n.clone()) {
            Some(c) => c,
            None => {
                ridge = true;
                let shift = 1e-12 * n.trace() / q as f64;
                for i in 0..q {
                    n[(i, i)] += shift;
                }
                Cholesky::new(n).ok_or_else(|| Error::NotSpd("Gram matrix of recorded fields".into()))?
            }
        };
        Ok(Self { mesh: run.mesh.clone(), modes, reference, mass, chol, ridge })
    }

    pub fn evaluate(&self, abar: SymMat) -> Result<Quality> {
        let solver = NeumannSolver::for_field(&self.mesh, &CoefficientField::constant(abar))?;
        let ubar = solver.solve_many(&self.modes)?;
        let diffs: Vec<Vec<f64>> = self
            .reference
            .iter()
            .zip(&ubar)
            .map(|(a, b)| a.iter().zip(&b.values).map(|(x, y)| x - y).collect())
            .collect();
        Ok(Quality { value: self.sup_ratio(&diffs), ridge: self.ridge })
    }

    /// `√λ_max` of the pencil `(D, N)` for the given differences.
    pub fn sup_ratio(&self, diffs: &[Vec<f64>]) -> f64 {
        let d = gram(diffs, &self.mass);
        let l = self.chol.l();
        let x = l.solve_lower_triangular(&d).expect("triangular factor is invertible");
        let c = l.solve_lower_triangular(&x.transpose()).expect("triangular factor is invertible");
        let c = (&c + c.transpose()) * 0.5;
        SymmetricEigen::new(c).eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt()
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }
}

fn gram(fields: &[Vec<f64>], mass: &SymCsc) -> DMatrix<f64> {
    let m: Vec<Vec<f64>> = fields.iter().map(|f| mass.mul_vec(f)).collect();
    let k = fields.len();
    DMatrix::from_fn(k, k, |i, j| 0.5 * (dot(&fields[i], &m[j]) + dot(&fields[j], &m[i])))
}

/// Mean and normal-approximation 95% confidence interval over batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStat {
    pub mean: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub m1: usize,
    pub m2: usize,
}

impl EnsembleStat {
    pub fn from_batches(values: &[f64], m1: usize) -> Result<Self> {
        let m2 = values.len();
        if m2 < 2 {
            return Err(Error::invalid("a confidence interval needs at least two batches"));
        }
        let mean = values.iter().sum::<f64>() / m2 as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m2 - 1) as f64;
        let half = 1.96 * var.sqrt() / (m2 as f64).sqrt();
        Ok(Self { mean, ci95_low: mean - half, ci95_high: mean + half, m1, m2 })
    }

    pub fn width(&self) -> f64 {
        self.ci95_high - self.ci95_low
    }
}

/// Seeds of batch `batch`: `base + batch·m1 + i` for `i < m1`.
pub fn batch_seeds(base_seed: u64, batch: usize, m1: usize) -> Vec<u64> {
    (0..m1).map(|i| base_seed + (batch * m1 + i) as u64).collect()
}

/// Run `estimate` on `m2` batches of fresh seeds and summarize.
pub fn ensemble(
    m1: usize,
    m2: usize,
    base_seed: u64,
    estimate: impl Fn(&[u64]) -> Result<f64>,
) -> Result<EnsembleStat> {
    let values = (0..m2).map(|b| estimate(&batch_seeds(base_seed, b, m1))).collect::<Result<Vec<_>>>()?;
    EnsembleStat::from_batches(&values, m1)
}

/// `Ψ_ε(ā) = ¼ |∫₀¹ a_ε⁻¹ − ā⁻¹|` over a grid of scalar coefficients, the
/// one-dimensional objective for the datum `g(0) = −g(1) = 2^{-1/2}`.
pub fn one_d_profile(a_eps: impl Fn(f64) -> f64, grid: &[f64], points: usize) -> Result<Vec<(f64, f64)>> {
    let e = crate::identify::energy_1d(a_eps, points)?;
    grid.iter()
        .map(|&a| {
            if !(a > 0.0) {
                return Err(Error::invalid(format!("grid value {a} is not positive")));
            }
            Ok((a, (e + 0.25 / a).abs()))
        })
        .collect()
}

/// Evenly spaced points `lo, lo + step, …` up to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// Argmin of a profile (first one on ties).
pub fn argmin(profile: &[(f64, f64)]) -> Option<(f64, f64)> {
    profile.iter().copied().reduce(|best, p| if p.1 < best.1 { p } else { best })
}

/// Oscillatory coefficient families of the experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientSpec {
    PeriodicPaper,
    Checkerboard,
    Constant { a11: f64, a12: f64, a22: f64 },
    Layered { base: f64, amplitude: f64 },
}

impl CoefficientSpec {
    pub fn is_random(&self) -> bool {
        matches!(self, Self::Checkerboard)
    }

    /// The field at scale `ε`; `seed` selects a realization of random fields.
    pub fn field(&self, epsilon: f64, seed: u64) -> Result<CoefficientField> {
        match self {
            Self::PeriodicPaper => scale_epsilon(CoefficientField::PeriodicPaper, epsilon),
            Self::Layered { base, amplitude } => {
                scale_epsilon(CoefficientField::Layered { base: *base, amplitude: *amplitude }, epsilon)
            }
            Self::Constant { a11, a12, a22 } => Ok(CoefficientField::constant(SymMat::new(*a11, *a12, *a22))),
            Self::Checkerboard => sample_checkerboard(seed, epsilon),
        }
    }

    /// Unit-cell field of periodic families.
    fn cell_field(&self) -> Option<CoefficientField> {
        match self {
            Self::PeriodicPaper => Some(CoefficientField::PeriodicPaper),
            Self::Layered { base, amplitude } => Some(CoefficientField::Layered { base: *base, amplitude: *amplitude }),
            Self::Constant { a11, a12, a22 } => Some(CoefficientField::constant(SymMat::new(*a11, *a12, *a22))),
            Self::Checkerboard => None,
        }
    }

    /// Homogenized matrix: corrector solve on an `n × n` cell mesh, or the
    /// exact value for the checkerboard.
    pub fn reference(&self, cell_n: usize) -> Result<HomogenizedReference> {
        match self.cell_field() {
            Some(f) => homogenized_matrix(&build_periodic_cell_mesh(cell_n)?, &f),
            None => Ok(checkerboard_exact()),
        }
    }

    /// Starting point of the descent: the cell mean (phase mean for the
    /// checkerboard).
    pub fn initial_guess(&self) -> Result<SymMat> {
        match self.cell_field() {
            Some(f) => mean_over_cell(&f, DEFAULT_CELL_QUADRATURE),
            None => Ok(SymMat::scalar(10.0)),
        }
    }

    /// Number of cells per side the fine mesh should resolve exactly.
    fn alignment(&self, epsilon: f64) -> Option<usize> {
        match self {
            Self::Checkerboard => {
                let c = cells_per_side(epsilon);
                ((c as f64 * epsilon - 1.0).abs() < 1e-9).then_some(c)
            }
            _ => None,
        }
    }
}

/// Identification strategies compared in the sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ME")]
    Me,
    #[serde(rename = "MS")]
    Ms,
    #[serde(rename = "MV")]
    Mv,
    #[serde(rename = "A_star")]
    AStar,
    #[serde(rename = "ME-affine")]
    MeAffine,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Me => "ME",
            Self::Ms => "MS",
            Self::Mv => "MV",
            Self::AStar => "A_star",
            Self::MeAffine => "ME-affine",
        }
    }
}

/// One result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub experiment: String,
    pub strategy: String,
    pub epsilon: f64,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub r: f64,
    pub seed: u64,
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
    pub err_star: Option<f64>,
    pub err_eps_q: Option<f64>,
    pub psi_final: Option<f64>,
    pub iters: Option<usize>,
    pub wall_ms: u64,
}

impl Record {
    pub fn matrix(&self) -> SymMat {
        SymMat::new(self.a11, self.a12, self.a22)
    }
}

/// Meshes, transfer and mode bases shared by every case at one `ε`.
pub struct Setup {
    pub epsilon: f64,
    pub p: usize,
    pub q: usize,
    pub r: f64,
    pub coarse: Arc<TriMesh>,
    pub fine: Arc<TriMesh>,
    pub transfer: Transfer,
    /// The first `Q` R-modes on the coarse mesh.
    pub basis: ModeBasis,
}

/// Smallest multiple of the coarse subdivision count (and of `align`, if
/// given) whose mesh size is at most `ε / r`.
pub fn fine_subdivisions(epsilon: f64, r: f64, coarse_n: usize, align: Option<usize>) -> usize {
    let target = ((SQRT_2 * r / epsilon) - 1e-9).ceil().max(1.0) as usize;
    let base = align.map_or(coarse_n, |c| lcm(coarse_n, c));
    base * target.div_ceil(base)
}

impl Setup {
    pub fn new(spec: &CoefficientSpec, epsilon: f64, p: usize, q: usize, r: f64, coarse_h: f64) -> Result<Self> {
        if !(epsilon > 0.0 && r > 0.0 && coarse_h > 0.0) {
            return Err(Error::invalid("ε, r and H must be positive"));
        }
        if q < p || p == 0 {
            return Err(Error::invalid(format!("need 1 ≤ P ≤ Q, got P = {p}, Q = {q}")));
        }
        let nc = subdivisions_for_size(coarse_h);
        let coarse = Arc::new(build_unit_square_mesh(nc)?);
        let nf = fine_subdivisions(epsilon, r, nc, spec.alignment(epsilon));
        let fine = Arc::new(build_unit_square_mesh(nf)?);
        let transfer = Transfer::new(&coarse, &fine);
        let basis = compute_r_modes(&coarse, q)?;
        Ok(Self { epsilon, p, q, r, coarse, fine, transfer, basis })
    }

    /// Fine solves for the given coarse basis, averaged over `seeds` for
    /// random fields (one solve for deterministic ones).
    pub fn fine_run(&self, spec: &CoefficientSpec, basis: &ModeBasis, seeds: &[u64]) -> Result<FineRun> {
        if !spec.is_random() {
            return simulate(&self.transfer, basis, &self.fine, &spec.field(self.epsilon, 0)?, None);
        }
        if seeds.is_empty() {
            return Err(Error::invalid("a random coefficient needs at least one realization"));
        }
        let mut runs = Vec::with_capacity(seeds.len());
        let mut mean: Option<FineRun> = None;
        for group in seeds.chunks(REALIZATION_CHUNK) {
            let batch: Vec<FineRun> = group
                .par_iter()
                .map(|&s| simulate(&self.transfer, basis, &self.fine, &spec.field(self.epsilon, s)?, Some(s)))
                .collect::<Result<_>>()?;
            runs.extend(batch);
            // fold in seed order to keep sums reproducible
            let mut all = Vec::with_capacity(runs.len() + 1);
            all.extend(mean.take());
            all.append(&mut runs);
            mean = Some(sum_runs(all));
        }
        let mut total = mean.expect("at least one seed");
        let w = 1.0 / seeds.len() as f64;
        total.solutions.iter_mut().flatten().for_each(|x| *x *= w);
        total.energies.iter_mut().for_each(|x| *x *= w);
        total.cross.iter_mut().flatten().for_each(|x| *x *= w);
        Ok(total)
    }
}

/// Realizations solved concurrently before being folded into the sum. Fixed
/// so that the summation order, and hence every bit of the result, does not
/// depend on the number of worker threads.
const REALIZATION_CHUNK: usize = 8;

/// Entrywise sum of runs (no averaging), in order.
fn sum_runs(runs: Vec<FineRun>) -> FineRun {
    let k = runs.len() as f64;
    let mut m = FineRun::mean(runs).expect("non-empty");
    m.solutions.iter_mut().flatten().for_each(|x| *x *= k);
    m.energies.iter_mut().for_each(|x| *x *= k);
    m.cross.iter_mut().flatten().for_each(|x| *x *= k);
    m
}

/// Options shared by the identification pipelines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub objective: EnergyObjectiveKind,
    pub descent: DescentOptions,
    pub strategies: Vec<Strategy>,
    /// Compute `Err_{ε,Q}` for each strategy.
    pub quality: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            objective: EnergyObjectiveKind::PsiSigma,
            descent: DescentOptions::default(),
            strategies: vec![Strategy::Me, Strategy::AStar],
            quality: true,
        }
    }
}

/// Result of one identification.
#[derive(Clone, Debug)]
pub struct Identified {
    pub strategy: Strategy,
    pub matrix: SymMat,
    pub trace: Option<OptimizerTrace>,
    pub quality: Option<Quality>,
}

/// Identify `Ā` with every requested strategy from the same fine data
/// (averaged over `seeds` for random fields).
pub fn identify_case(
    setup: &Setup,
    spec: &CoefficientSpec,
    reference: SymMat,
    seeds: &[u64],
    opts: &PipelineOptions,
) -> Result<Vec<Identified>> {
    let run = setup.fine_run(spec, &setup.basis, seeds)?;
    let needs_fields = opts.strategies.iter().any(|s| matches!(s, Strategy::Ms | Strategy::Mv));
    let meas = run.measurements(&setup.basis, setup.p, needs_fields);
    let model = CoarseModel::new(setup.coarse.clone(), setup.basis.truncated(setup.p))?;
    let probe = opts.quality.then(|| QualityProbe::new(&setup.transfer, &setup.basis, &run)).transpose()?;
    drop(run);
    let init = spec.initial_guess()?.to_vec();
    let mut out = Vec::new();
    for &strategy in &opts.strategies {
        let trace = match strategy {
            Strategy::Me => Some(descend(&EnergyObjective::new(&model, &meas, opts.objective)?, &init, &opts.descent)?),
            Strategy::Ms => Some(descend(&FieldObjective::new(&model, &meas, FieldNorm::Surface)?, &init, &opts.descent)?),
            Strategy::Mv => Some(descend(&FieldObjective::new(&model, &meas, FieldNorm::Volume)?, &init, &opts.descent)?),
            Strategy::AStar => None,
            Strategy::MeAffine => {
                let affine = affine_modes(&setup.coarse)?;
                let arun = setup.fine_run(spec, &affine, seeds)?;
                let ameas = arun.measurements(&affine, affine.len(), false);
                let amodel = CoarseModel::new(setup.coarse.clone(), affine)?;
                let obj = EnergyObjective::new(&amodel, &ameas, EnergyObjectiveKind::PsiSigma)?;
                Some(descend(&obj, &init, &opts.descent)?)
            }
        };
        let matrix = trace.as_ref().map_or(reference, |t| t.final_matrix());
        let quality = probe.as_ref().map(|p| p.evaluate(matrix)).transpose()?;
        out.push(Identified { strategy, matrix, trace, quality });
    }
    Ok(out)
}

fn record(
    experiment: &str,
    setup: &Setup,
    seed: u64,
    id: &Identified,
    reference: SymMat,
    started: Instant,
) -> Record {
    Record {
        experiment: experiment.into(),
        strategy: id.strategy.tag().into(),
        epsilon: setup.epsilon,
        p: setup.p,
        q: setup.q,
        r: setup.r,
        seed,
        a11: id.matrix.a11,
        a12: id.matrix.a12,
        a22: id.matrix.a22,
        err_star: Some(err_star(id.matrix, reference)),
        err_eps_q: id.quality.map(|q| q.value),
        psi_final: id.trace.as_ref().map(|t| t.final_value()),
        iters: id.trace.as_ref().map(|t| t.iterations()),
        wall_ms: started.elapsed().as_millis() as u64,
    }
}

/// Parameters of a sweep over `ε`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub coefficient: CoefficientSpec,
    pub epsilons: Vec<f64>,
    /// `None` selects `P` from `ε`.
    pub p: Option<usize>,
    pub q: usize,
    pub r: f64,
    pub coarse_h: f64,
    pub m1: usize,
    pub m2: usize,
    pub base_seed: u64,
    pub cell_n: usize,
}

/// Summary of one metric over batches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub epsilon: f64,
    pub strategy: String,
    pub metric: String,
    pub stat: EnsembleStat,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<Record>,
    pub ensembles: Vec<EnsembleSummary>,
    /// `(ε, message)` for cases that failed; the sweep continues past them.
    pub failures: Vec<(f64, String)>,
    pub reference: Option<HomogenizedReference>,
}

/// Sweep over `ε`: one record per strategy (per batch for random fields).
pub fn sweep(spec: &SweepSpec, opts: &PipelineOptions) -> Result<SweepResult> {
    let mut result = SweepResult::default();
    if spec.epsilons.is_empty() {
        return Ok(result);
    }
    let reference = spec.coefficient.reference(spec.cell_n)?;
    result.reference = Some(reference);
    for &eps in &spec.epsilons {
        match sweep_one(spec, opts, eps, reference.matrix) {
            Ok((records, ensembles)) => {
                result.records.extend(records);
                result.ensembles.extend(ensembles);
            }
            Err(e) => result.failures.push((eps, e.to_string())),
        }
    }
    Ok(result)
}

fn sweep_one(
    spec: &SweepSpec,
    opts: &PipelineOptions,
    eps: f64,
    reference: SymMat,
) -> Result<(Vec<Record>, Vec<EnsembleSummary>)> {
    let p = spec.p.unwrap_or_else(|| crate::modes::choose_p(eps));
    let setup = Setup::new(&spec.coefficient, eps, p, spec.q.max(p), spec.r, spec.coarse_h)?;
    let mut records = Vec::new();
    if !spec.coefficient.is_random() {
        let started = Instant::now();
        for id in identify_case(&setup, &spec.coefficient, reference, &[], opts)? {
            records.push(record("sweep", &setup, spec.base_seed, &id, reference, started));
        }
        return Ok((records, vec![]));
    }
    for b in 0..spec.m2 {
        let started = Instant::now();
        let seeds = batch_seeds(spec.base_seed, b, spec.m1);
        for id in identify_case(&setup, &spec.coefficient, reference, &seeds, opts)? {
            records.push(record("sweep", &setup, seeds[0], &id, reference, started));
        }
    }
    let mut ensembles = Vec::new();
    if spec.m2 >= 2 {
        for s in &opts.strategies {
            let rows: Vec<&Record> = records.iter().filter(|r| r.strategy == s.tag()).collect();
            let mut metrics = vec![("err_star", rows.iter().filter_map(|r| r.err_star).collect::<Vec<_>>())];
            metrics.push(("err_eps_q", rows.iter().filter_map(|r| r.err_eps_q).collect()));
            for (metric, values) in metrics {
                if values.len() == rows.len() && values.len() >= 2 {
                    ensembles.push(EnsembleSummary {
                        epsilon: eps,
                        strategy: s.tag().into(),
                        metric: metric.into(),
                        stat: EnsembleStat::from_batches(&values, spec.m1)?,
                    });
                }
            }
        }
    }
    Ok((records, ensembles))
}

/// Least-squares line `y = a + b x` and its coefficient of determination.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { intercept: my - slope * mx, slope, r_squared }
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).slope
}

/// Mean relative coefficient error at one noise level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub sigma: f64,
    pub mean_error: f64,
    pub errors: Vec<f64>,
    pub stat: Option<EnsembleStat>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseStudy {
    pub epsilon: f64,
    /// `Ā` identified from the noiseless measurements.
    pub noiseless: SymMat,
    pub levels: Vec<NoiseLevel>,
    pub fit: Option<LinearFit>,
    pub records: Vec<Record>,
}

/// Multiplicative measurement noise: identify from `draws` noisy copies of
/// the measurements at each level and compare with the noiseless `Ā`.
/// Draw `k` at level `l` uses seed `base_seed + l·draws + k`.
pub fn noise_measurement_study(
    spec: &SweepSpec,
    epsilon: f64,
    sigmas: &[f64],
    draws: usize,
    opts: &PipelineOptions,
) -> Result<NoiseStudy> {
    let p = spec.p.unwrap_or_else(|| crate::modes::choose_p(epsilon));
    let setup = Setup::new(&spec.coefficient, epsilon, p, p, spec.r, spec.coarse_h)?;
    let reference = spec.coefficient.reference(spec.cell_n)?.matrix;
    let seeds = if spec.coefficient.is_random() { batch_seeds(spec.base_seed, 0, spec.m1) } else { vec![] };
    let run = setup.fine_run(&spec.coefficient, &setup.basis, &seeds)?;
    let meas = run.measurements(&setup.basis, p, false);
    drop(run);
    let model = CoarseModel::new(setup.coarse.clone(), setup.basis.clone())?;
    let init = spec.coefficient.initial_guess()?.to_vec();
    let identify = |m: &Measurements| -> Result<OptimizerTrace> {
        descend(&EnergyObjective::new(&model, m, opts.objective)?, &init, &opts.descent)
    };
    let started = Instant::now();
    let clean = identify(&meas)?;
    let noiseless = clean.final_matrix();
    let mut records = vec![trace_record("noise_measurement", "ME", &setup, spec.base_seed, &clean, reference, started)];
    let mut levels = Vec::new();
    for (l, &sigma) in sigmas.iter().enumerate() {
        let results: Vec<(u64, OptimizerTrace)> = (0..draws)
            .into_par_iter()
            .map(|k| {
                let seed = spec.base_seed + (l * draws + k) as u64;
                let started = Instant::now();
                let noisy = apply_measurement_noise(&meas, sigma, seed)?;
                let t = identify(&noisy)?;
                Ok((seed, t, started.elapsed().as_millis() as u64))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|(seed, t, ms)| {
                let mut r = trace_record("noise_measurement", "ME", &setup, seed, &t, reference, started);
                r.wall_ms = ms;
                records.push(r);
                (seed, t)
            })
            .collect();
        let errors: Vec<f64> = results.iter().map(|(_, t)| err_star(t.final_matrix(), noiseless)).collect();
        let mean_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        let stat = (errors.len() >= 2).then(|| EnsembleStat::from_batches(&errors, 1)).transpose()?;
        levels.push(NoiseLevel { sigma, mean_error, errors, stat });
    }
    let fit = (levels.len() >= 2).then(|| {
        linear_fit(&levels.iter().map(|l| l.sigma).collect::<Vec<_>>(), &levels.iter().map(|l| l.mean_error).collect::<Vec<_>>())
    });
    Ok(NoiseStudy { epsilon, noiseless, levels, fit, records })
}

fn trace_record(
    experiment: &str,
    strategy: &str,
    setup: &Setup,
    seed: u64,
    t: &OptimizerTrace,
    reference: SymMat,
    started: Instant,
) -> Record {
    let a = t.final_matrix();
    Record {
        experiment: experiment.into(),
        strategy: strategy.into(),
        epsilon: setup.epsilon,
        p: setup.p,
        q: setup.q,
        r: setup.r,
        seed,
        a11: a.a11,
        a12: a.a12,
        a22: a.a22,
        err_star: Some(err_star(a, reference)),
        err_eps_q: None,
        psi_final: Some(t.final_value()),
        iters: Some(t.iterations()),
        wall_ms: started.elapsed().as_millis() as u64,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoefficientNoiseStudy {
    pub epsilon: f64,
    pub sigma: f64,
    pub draws: usize,
    pub noiseless: SymMat,
    pub noisy: SymMat,
    /// `‖Ā_σ − Ā‖ / ‖Ā‖` in the entrywise norm.
    pub relative_difference: f64,
    /// Draws rejected at the final point because `Ā + η` was not definite.
    pub rejected: usize,
    pub records: Vec<Record>,
}

/// Identification with the expected energy of `Ā + η` in the objective,
/// compared with the noiseless identification from the same measurements.
pub fn noise_coefficient_study(
    spec: &SweepSpec,
    epsilon: f64,
    sigma: f64,
    draws: usize,
    opts: &PipelineOptions,
) -> Result<CoefficientNoiseStudy> {
    let p = spec.p.unwrap_or_else(|| crate::modes::choose_p(epsilon));
    let setup = Setup::new(&spec.coefficient, epsilon, p, p, spec.r, spec.coarse_h)?;
    let reference = spec.coefficient.reference(spec.cell_n)?.matrix;
    let seeds = if spec.coefficient.is_random() { batch_seeds(spec.base_seed, 0, spec.m1) } else { vec![] };
    let meas = setup.fine_run(&spec.coefficient, &setup.basis, &seeds)?.measurements(&setup.basis, p, false);
    let model = CoarseModel::new(setup.coarse.clone(), setup.basis.clone())?;
    let init = spec.coefficient.initial_guess()?.to_vec();
    let started = Instant::now();
    let clean = descend(&EnergyObjective::new(&model, &meas, opts.objective)?, &init, &opts.descent)?;
    let mut records = vec![trace_record("noise_coefficient", "ME", &setup, spec.base_seed, &clean, reference, started)];
    let started = Instant::now();
    let obj = CoefficientNoiseObjective::new(&model, &meas, opts.objective, sigma, draws, spec.base_seed)?;
    let noisy = descend(&obj, &init, &opts.descent)?;
    obj.value(noisy.final_point())?;
    records.push(trace_record("noise_coefficient", "ME-noise", &setup, spec.base_seed, &noisy, reference, started));
    let (a0, a1) = (clean.final_matrix(), noisy.final_matrix());
    Ok(CoefficientNoiseStudy {
        epsilon,
        sigma,
        draws,
        noiseless: a0,
        noisy: a1,
        relative_difference: err_star(a1, a0),
        rejected: obj.rejected(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn err_star_example() {
        let v = err_star(SymMat::diag(20.0, 12.0), SymMat::new(19.3378, 0.0, 11.8312));
        assert!((v - 0.03015).abs() < 5e-5, "{v}");
        assert_eq!(err_star(SymMat::diag(3.0, 2.0), SymMat::diag(3.0, 2.0)), 0.0);
    }

    #[test]
    fn fine_sizes_nest() {
        assert_eq!(fine_subdivisions(0.05, 20.0, 29, None), 580);
        assert_eq!(fine_subdivisions(0.1, 20.0, 29, None), 290);
        assert_eq!(fine_subdivisions(0.2, 20.0, 29, None), 145);
        assert_eq!(fine_subdivisions(0.1, 10.0, 29, Some(10)), 290);
    }

    #[test]
    fn ensemble_of_constant_has_zero_width() {
        let s = ensemble(3, 4, 7, |_| Ok(2.5)).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.width(), 0.0);
        assert!(EnsembleStat::from_batches(&[1.0], 1).is_err());
        assert_eq!(batch_seeds(100, 2, 3), vec![106, 107, 108]);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let f = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!((f.r_squared - 1.0).abs() < 1e-14);
        assert!((log_log_slope(&[1.0, 2.0, 4.0], &[1.0, 4.0, 16.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_profile_vanishes_at_the_constant() {
        let prof = one_d_profile(|_| 2.5, &grid(1.0, 4.0, 0.5), 10).unwrap();
        let (a, v) = argmin(&prof).unwrap();
        assert_eq!(a, 2.5);
        assert!(v < 1e-15);
        assert!(one_d_profile(|_| 1.0, &[0.0], 10).is_err());
    }
}
