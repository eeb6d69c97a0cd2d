//! Identification of a constant matrix `Ā` from energy measurements.
//!
//! A [`CoarseModel`] solves the constant-coefficient problems on the coarse
//! mesh for the chosen boundary data; objectives compare those against
//! [`Measurements`] and are minimized by Armijo gradient descent
//! ([`descend`]).

use std::cell::Cell;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, SymMat};
use crate::eigen::{block_krylov, Deflation, KrylovOptions, Target};
use crate::error::{Error, Result};
use crate::mesh::{Transfer, TriMesh};
use crate::modes::{apply_sign_convention, prolongate_basis, ModeBasis};
use crate::solver::{BoundarySpace, NeumannSolver, StiffnessAssembler};
use crate::sparse::{dot, SolverKind, SymCsc, SymbolicFactor};

/// Where a set of measurements came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Simulated { fine_n: usize, seeds: Vec<u64> },
    Injected,
}

/// Full fine-mesh fields kept for the trace- and volume-based baselines.
#[derive(Clone, Debug)]
pub struct RecordedFields {
    pub fine_mesh: Arc<TriMesh>,
    /// Fine-mesh boundary traces, one per mode.
    pub traces: Vec<Vec<f64>>,
    /// Fine-mesh nodal values, one per mode.
    pub volume: Vec<Vec<f64>>,
}

/// Observed data for the boundary conditions of `basis`.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub basis: ModeBasis,
    /// `E(A_ε, φ_p)`.
    pub energies: Vec<f64>,
    /// `cross[q][p] = ⟨φ_q, trace u_ε(φ_p)⟩`.
    pub cross: Option<Vec<Vec<f64>>>,
    pub fields: Option<RecordedFields>,
    pub provenance: Provenance,
}

/// Fine-mesh solutions of the oscillatory problem for a list of boundary
/// data, possibly averaged over realizations of a random coefficient.
#[derive(Clone, Debug)]
pub struct FineRun {
    pub mesh: Arc<TriMesh>,
    pub solutions: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub cross: Vec<Vec<f64>>,
    /// Seeds of the realizations included (empty for deterministic fields).
    pub seeds: Vec<u64>,
}

/// Solve the oscillatory problem on `fine` for every mode of a coarse basis.
pub fn simulate(
    transfer: &Transfer,
    basis: &ModeBasis,
    fine: &Arc<TriMesh>,
    field: &CoefficientField,
    seed: Option<u64>,
) -> Result<FineRun> {
    let fine_basis = prolongate_basis(basis, transfer);
    let solver = NeumannSolver::for_field(fine, field)?;
    let space = solver.space();
    let solutions: Vec<Vec<f64>> =
        solver.solve_many(&fine_basis.modes)?.into_iter().map(|s| s.values).collect();
    let traces: Vec<Vec<f64>> = solutions.iter().map(|u| space.trace(u)).collect();
    let cross: Vec<Vec<f64>> = fine_basis
        .modes
        .iter()
        .map(|q| traces.iter().map(|t| space.inner(&q.values, t)).collect())
        .collect();
    let energies = (0..traces.len()).map(|p| -0.5 * cross[p][p]).collect();
    Ok(FineRun { mesh: fine.clone(), solutions, energies, cross, seeds: seed.into_iter().collect() })
}

impl FineRun {
    /// Mean of several runs on the same mesh, accumulated in iteration order.
    pub fn mean(runs: impl IntoIterator<Item = FineRun>) -> Result<FineRun> {
        let mut count = 0usize;
        let mut acc: Option<FineRun> = None;
        for run in runs {
            count += 1;
            match acc.as_mut() {
                None => acc = Some(run),
                Some(a) => {
                    if a.solutions.len() != run.solutions.len() || a.mesh.n != run.mesh.n {
                        return Err(Error::invalid("runs to average differ in mesh or mode count"));
                    }
                    for (x, y) in a.solutions.iter_mut().zip(&run.solutions) {
                        x.iter_mut().zip(y).for_each(|(x, y)| *x += y);
                    }
                    a.energies.iter_mut().zip(&run.energies).for_each(|(x, y)| *x += y);
                    for (x, y) in a.cross.iter_mut().zip(&run.cross) {
                        x.iter_mut().zip(y).for_each(|(x, y)| *x += y);
                    }
                    a.seeds.extend(run.seeds);
                }
            }
        }
        let mut a = acc.ok_or_else(|| Error::invalid("no runs to average"))?;
        if count > 1 {
            let w = 1.0 / count as f64;
            a.solutions.iter_mut().flatten().for_each(|x| *x *= w);
            a.energies.iter_mut().for_each(|x| *x *= w);
            a.cross.iter_mut().flatten().for_each(|x| *x *= w);
        }
        Ok(a)
    }

    /// Measurements on the first `p` modes of `basis`.
    pub fn measurements(&self, basis: &ModeBasis, p: usize, record_fields: bool) -> Measurements {
        let fields = record_fields.then(|| self.fields(p));
        Measurements {
            basis: basis.truncated(p),
            energies: self.energies[..p].to_vec(),
            cross: Some(self.cross[..p].iter().map(|row| row[..p].to_vec()).collect()),
            fields,
            provenance: Provenance::Simulated { fine_n: self.mesh.n, seeds: self.seeds.clone() },
        }
    }

    /// Recorded traces and volume fields of the first `p` modes.
    pub fn fields(&self, p: usize) -> RecordedFields {
        let space = BoundarySpace::new(&self.mesh);
        RecordedFields {
            fine_mesh: self.mesh.clone(),
            traces: self.solutions[..p].iter().map(|u| space.trace(u)).collect(),
            volume: self.solutions[..p].to_vec(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MeasurementFile {
    schema_version: u32,
    energy: Vec<EnergyRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cross: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct EnergyRecord {
    mode: usize,
    value: f64,
}

impl Measurements {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Parse injected measurements: a TOML document with
    /// `schema_version = 1`, one `[[energy]]` table per mode (`mode`, 1-based,
    /// and `value`) and an optional `cross` array of rows.
    pub fn from_toml(text: &str, basis: &ModeBasis) -> Result<Self> {
        let file: MeasurementFile =
            toml::from_str(text).map_err(|e| Error::invalid(format!("measurement file: {e}")))?;
        if file.schema_version != 1 {
            return Err(Error::invalid(format!("unsupported schema_version {}", file.schema_version)));
        }
        let p = file.energy.len();
        if p == 0 || p > basis.len() {
            return Err(Error::invalid(format!("{p} energies for a basis of {} modes", basis.len())));
        }
        let mut energies = vec![f64::NAN; p];
        for r in &file.energy {
            if r.mode == 0 || r.mode > p || !energies[r.mode - 1].is_nan() {
                return Err(Error::invalid(format!("bad or repeated mode index {}", r.mode)));
            }
            energies[r.mode - 1] = r.value;
        }
        if let Some(c) = &file.cross {
            if c.len() != p || c.iter().any(|row| row.len() != p) {
                return Err(Error::invalid("cross table must be P × P"));
            }
        }
        let m = Measurements {
            basis: basis.truncated(p),
            energies,
            cross: file.cross,
            fields: None,
            provenance: Provenance::Injected,
        };
        m.check()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        let file = MeasurementFile {
            schema_version: 1,
            energy: self
                .energies
                .iter()
                .enumerate()
                .map(|(i, &value)| EnergyRecord { mode: i + 1, value })
                .collect(),
            cross: self.cross.clone(),
        };
        toml::to_string(&file).expect("measurement file serializes")
    }

    /// Energies non-positive, cross table symmetric with a diagonal matching
    /// the energies.
    pub fn check(&self) -> Result<()> {
        if self.energies.iter().any(|&e| !(e <= 0.0)) {
            return Err(Error::invalid("measured energies must be non-positive"));
        }
        if let Some(c) = &self.cross {
            let scale = c.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            for p in 0..c.len() {
                if (c[p][p] + 2.0 * self.energies[p]).abs() > 1e-8 * scale {
                    return Err(Error::invalid(format!("cross[{p}][{p}] disagrees with energy {p}")));
                }
                for q in 0..p {
                    if (c[p][q] - c[q][p]).abs() > 1e-8 * scale {
                        return Err(Error::invalid("cross table is not symmetric"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Multiplicative noise `E_p ← (1 + σ η_p) E_p` with i.i.d. standard normal
/// `η_p` drawn from the seed. Diagonal cross entries follow the energies.
pub fn apply_measurement_noise(meas: &Measurements, sigma: f64, seed: u64) -> Result<Measurements> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise level must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = meas.clone();
    for (p, e) in out.energies.iter_mut().enumerate() {
        *e *= 1.0 + sigma * normal.sample(&mut rng);
        if let Some(c) = out.cross.as_mut() {
            c[p][p] = -2.0 * *e;
        }
    }
    Ok(out)
}

/// Constant-coefficient solves on the coarse mesh for a fixed basis.
pub struct CoarseModel {
    pub mesh: Arc<TriMesh>,
    pub basis: ModeBasis,
    space: BoundarySpace,
    components: [SymCsc; 3],
    symbolic: SymbolicFactor,
    loads: Vec<Vec<f64>>,
}

/// Everything the objectives need at one `Ā`.
#[derive(Clone, Debug)]
pub struct CoarseState {
    pub abar: SymMat,
    pub solutions: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    /// `cross[q][p] = ⟨φ_q, trace u(Ā, φ_p)⟩`.
    pub cross: Vec<Vec<f64>>,
    /// `grams[k][p][q] = u_pᵀ K_k u_q`, with `K_k = ∂K/∂(a11, a12, a22)_k`.
    /// On the diagonal this is `(2 − δ_ij) ∫ ∂_i u ∂_j u`.
    pub grams: [Vec<Vec<f64>>; 3],
}

impl CoarseModel {
    pub fn new(mesh: Arc<TriMesh>, basis: ModeBasis) -> Result<Self> {
        let assembler = StiffnessAssembler::new(&mesh);
        let components = assembler.components();
        let space = BoundarySpace::new(&mesh);
        let mut pinned = assembler.pattern().clone();
        pinned.values.iter_mut().for_each(|v| *v = 1.0);
        let symbolic = SymbolicFactor::analyze(&pinned)?;
        let loads = basis.modes.iter().map(|m| m.load(&space)).collect();
        Ok(Self { mesh, basis, space, components, symbolic, loads })
    }

    pub fn space(&self) -> &BoundarySpace {
        &self.space
    }

    pub fn num_modes(&self) -> usize {
        self.loads.len()
    }

    fn solver(&self, abar: SymMat) -> Result<NeumannSolver> {
        if !abar.is_spd() {
            return Err(Error::NotSpd(format!("coefficient {abar} is not positive definite")));
        }
        let mut k = self.components[0].clone();
        let (c1, c2) = (&self.components[1].values, &self.components[2].values);
        for (i, v) in k.values.iter_mut().enumerate() {
            *v = abar.a11 * *v + abar.a12 * c1[i] + abar.a22 * c2[i];
        }
        NeumannSolver::new(self.space.clone(), &k, Some(&self.symbolic), SolverKind::Cholesky)
    }

    pub fn solve(&self, abar: SymMat) -> Result<CoarseState> {
        let solutions = self.solver(abar)?.solve_loads(&self.loads)?;
        let p = solutions.len();
        let cross: Vec<Vec<f64>> = self
            .loads
            .iter()
            .map(|b| solutions.iter().map(|u| self.boundary_dot(b, u)).collect())
            .collect();
        let energies = (0..p).map(|i| -0.5 * cross[i][i]).collect();
        let grams = std::array::from_fn(|k| {
            let ku: Vec<Vec<f64>> = solutions.iter().map(|u| self.components[k].mul_vec(u)).collect();
            (0..p).map(|i| (0..p).map(|j| dot(&solutions[i], &ku[j])).collect()).collect()
        });
        Ok(CoarseState { abar, solutions, energies, cross, grams })
    }

    /// Energies only (one factorization, `P` solves).
    pub fn energies(&self, abar: SymMat) -> Result<Vec<f64>> {
        let solutions = self.solver(abar)?.solve_loads(&self.loads)?;
        Ok(self.loads.iter().zip(&solutions).map(|(b, u)| -0.5 * self.boundary_dot(b, u)).collect())
    }

    /// Cross table only.
    pub fn cross(&self, abar: SymMat) -> Result<Vec<Vec<f64>>> {
        let solutions = self.solver(abar)?.solve_loads(&self.loads)?;
        Ok(self.loads.iter().map(|b| solutions.iter().map(|u| self.boundary_dot(b, u)).collect()).collect())
    }

    fn boundary_dot(&self, load: &[f64], u: &[f64]) -> f64 {
        self.space.nodes.iter().zip(load).map(|(&k, b)| b * u[k]).sum()
    }

    /// Simulated measurements of a constant coefficient on this coarse mesh.
    pub fn synthetic_measurements(&self, a0: SymMat) -> Result<Measurements> {
        let s = self.solve(a0)?;
        Ok(Measurements {
            basis: self.basis.clone(),
            energies: s.energies,
            cross: Some(s.cross),
            fields: None,
            provenance: Provenance::Simulated { fine_n: self.mesh.n, seeds: vec![] },
        })
    }
}

/// Energies `E(Ā, φ_p)` and solutions on the coarse mesh.
pub fn coarse_energies(abar: SymMat, basis: &ModeBasis, coarse_mesh: &Arc<TriMesh>) -> Result<CoarseState> {
    CoarseModel::new(coarse_mesh.clone(), basis.clone())?.solve(abar)
}

/// The P × P matrix `M_pq = ½⟨φ_q, trace u_ε(φ_p) − trace u(Ā, φ_p)⟩`.
#[derive(Clone, Debug)]
pub struct MMatrix {
    pub m: DMatrix<f64>,
    /// Set when the measurements have no cross table and only the diagonal is known.
    pub diagonal_only: bool,
    /// Relative asymmetry before symmetrization.
    pub symmetry_defect: f64,
}

pub fn assemble_m(state: &CoarseState, meas: &Measurements) -> MMatrix {
    let p = meas.len();
    let mut m = DMatrix::zeros(p, p);
    let Some(cross) = &meas.cross else {
        for i in 0..p {
            m[(i, i)] = -(meas.energies[i] - state.energies[i]);
        }
        return MMatrix { m, diagonal_only: true, symmetry_defect: 0.0 };
    };
    for q in 0..p {
        for r in 0..p {
            m[(q, r)] = 0.5 * (cross[q][r] - state.cross[q][r]);
        }
    }
    let asym = (&m - m.transpose()).norm();
    let defect = if m.norm() > 0.0 { asym / m.norm() } else { 0.0 };
    let sym = (&m + m.transpose()) * 0.5;
    MMatrix { m: sym, diagonal_only: false, symmetry_defect: defect }
}

/// Squared largest-magnitude eigenvalue of `M` and its unit eigenvector.
/// Ties go to the eigenvector listed first in increasing-eigenvalue order.
pub fn psi_max(m: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let (mu, c) = extreme_eigenpair(m);
    (mu * mu, c)
}

fn extreme_eigenpair(m: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut best = idx[0];
    for &i in &idx[1..] {
        if eig.eigenvalues[i].abs() > eig.eigenvalues[best].abs() + 1e-12 * scale {
            best = i;
        }
    }
    let mut c: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    apply_sign_convention(&mut c);
    (eig.eigenvalues[best], c)
}

/// `Σ_p (E(A_ε, φ_p) − E(Ā, φ_p))²`.
pub fn psi_sigma(state: &CoarseState, meas: &Measurements) -> f64 {
    meas.energies.iter().zip(&state.energies).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Objective functions of the identification problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyObjectiveKind {
    PsiMax,
    PsiSigma,
}

/// Adjoint gradient with respect to `(a11, a12, a22)`.
///
/// For `Ψ^Σ` it is `Σ_p −(E_ε,p − E_Ā,p) G(u_p)`; for `Ψ_max = μ²` with
/// argmax coefficients `c` it is `μ · G(Σ c_p u_p)`, where
/// `G(u) = ((2 − δ_ij) ∫ ∂_i u ∂_j u)` in the order `(11, 12, 22)`.
pub fn gradient(state: &CoarseState, meas: &Measurements, kind: EnergyObjectiveKind) -> [f64; 3] {
    let p = meas.len();
    match kind {
        EnergyObjectiveKind::PsiSigma => std::array::from_fn(|k| {
            (0..p).map(|i| -(meas.energies[i] - state.energies[i]) * state.grams[k][i][i]).sum()
        }),
        EnergyObjectiveKind::PsiMax => {
            let mm = assemble_m(state, meas);
            let (mu, c) = extreme_eigenpair(&mm.m);
            std::array::from_fn(|k| {
                let mut g = 0.0;
                for i in 0..p {
                    for j in 0..p {
                        g += c[i] * c[j] * state.grams[k][i][j];
                    }
                }
                mu * g
            })
        }
    }
}

/// Gram factor `(2 − δ_ij) ∫ ∂_i u ∂_j u` of the combination `Σ c_p u_p`.
pub fn gram_factor(state: &CoarseState, c: &[f64]) -> [f64; 3] {
    std::array::from_fn(|k| {
        let mut g = 0.0;
        for (i, ci) in c.iter().enumerate() {
            for (j, cj) in c.iter().enumerate() {
                g += ci * cj * state.grams[k][i][j];
            }
        }
        g
    })
}

/// A differentiable objective over a parameter vector.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Value and gradient; central finite differences by default.
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(x)?, central_difference(self, x, FD_STEP)?))
    }

    /// Whether `x` is in the domain (e.g. positive definite).
    fn admissible(&self, _x: &[f64]) -> bool {
        true
    }

    /// Characteristic size of the objective, used to make the stopping
    /// rule independent of the units of the measurements.
    fn scale(&self) -> f64 {
        1.0
    }

    /// Whether the gradient is continuous, so that secant step estimates
    /// are meaningful.
    fn smooth(&self) -> bool {
        true
    }
}

pub const FD_STEP: f64 = 1e-4;

/// Central differences with absolute step `h` on every coordinate.
pub fn central_difference<O: Objective + ?Sized>(obj: &O, x: &[f64], h: f64) -> Result<Vec<f64>> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            Ok((obj.value(&xp)? - obj.value(&xm)?) / (2.0 * h))
        })
        .collect()
}

fn energy_scale(meas: &Measurements) -> f64 {
    meas.energies.iter().map(|e| e * e).sum::<f64>().max(f64::MIN_POSITIVE)
}

/// `Ψ_max` or `Ψ^Σ` over `(a11, a12, a22)` with the adjoint gradient.
pub struct EnergyObjective<'a> {
    pub model: &'a CoarseModel,
    pub meas: &'a Measurements,
    pub kind: EnergyObjectiveKind,
}

impl<'a> EnergyObjective<'a> {
    pub fn new(model: &'a CoarseModel, meas: &'a Measurements, kind: EnergyObjectiveKind) -> Result<Self> {
        if meas.len() != model.num_modes() {
            return Err(Error::invalid(format!(
                "{} measurements for {} coarse modes",
                meas.len(),
                model.num_modes()
            )));
        }
        Ok(Self { model, meas, kind })
    }

    fn eval_state(&self, state: &CoarseState) -> f64 {
        match self.kind {
            EnergyObjectiveKind::PsiSigma => psi_sigma(state, self.meas),
            EnergyObjectiveKind::PsiMax => psi_max(&assemble_m(state, self.meas).m).0,
        }
    }
}

impl Objective for EnergyObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let abar = to_symmat(x);
        if self.kind == EnergyObjectiveKind::PsiSigma {
            let e = self.model.energies(abar)?;
            return Ok(self.meas.energies.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum());
        }
        Ok(self.eval_state(&self.model.solve(abar)?))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let state = self.model.solve(to_symmat(x))?;
        Ok((self.eval_state(&state), gradient(&state, self.meas, self.kind).to_vec()))
    }

    fn admissible(&self, x: &[f64]) -> bool {
        to_symmat(x).is_spd()
    }

    fn scale(&self) -> f64 {
        energy_scale(self.meas)
    }

    fn smooth(&self) -> bool {
        self.kind == EnergyObjectiveKind::PsiSigma
    }
}

pub fn to_symmat(x: &[f64]) -> SymMat {
    SymMat::new(x[0], x[1], x[2])
}

/// Trace (MS) or volume (MV) comparison with recorded fine-mesh fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldNorm {
    Surface,
    Volume,
}

/// `sup_{g ∈ V^P, ‖g‖ = 1} ‖u_ε(g) − u(Ā, g)‖` on the boundary or in the
/// volume, as the square root of the largest eigenvalue of the Gram matrix
/// of differences. Assumes an orthonormal basis.
pub struct FieldObjective<'a> {
    model: &'a CoarseModel,
    fields: &'a RecordedFields,
    norm: FieldNorm,
    transfer: Transfer,
    mass: SymCsc,
    scale: f64,
}

impl<'a> FieldObjective<'a> {
    pub fn new(model: &'a CoarseModel, meas: &'a Measurements, norm: FieldNorm) -> Result<Self> {
        let fields = meas
            .fields
            .as_ref()
            .ok_or_else(|| Error::MissingData("trace/volume fields were not recorded".into()))?;
        let fine = &fields.fine_mesh;
        let transfer = Transfer::new(&model.mesh, fine);
        let (mass, data) = match norm {
            FieldNorm::Surface => (fine.boundary_mass_matrix(), &fields.traces),
            FieldNorm::Volume => (fine.volume_mass_matrix(), &fields.volume),
        };
        let scale = data.iter().map(|d| mass.quad(d)).sum::<f64>().max(f64::MIN_POSITIVE);
        Ok(Self { model, fields, norm, transfer, mass, scale })
    }

    /// Differences between recorded and coarse fields on the fine mesh.
    fn differences(&self, abar: SymMat) -> Result<Vec<Vec<f64>>> {
        let state = self.model.solve(abar)?;
        let space = self.model.space();
        Ok(state
            .solutions
            .iter()
            .enumerate()
            .map(|(p, u)| {
                let (coarse, recorded) = match self.norm {
                    FieldNorm::Surface => (self.transfer.boundary(&space.trace(u)), &self.fields.traces[p]),
                    FieldNorm::Volume => (self.transfer.volume(u), &self.fields.volume[p]),
                };
                recorded.iter().zip(&coarse).map(|(a, b)| a - b).collect()
            })
            .collect())
    }
}

/// Largest eigenvalue of the Gram matrix `⟨d_p, d_q⟩` under `mass`.
pub fn gram_sup(diffs: &[Vec<f64>], mass: &SymCsc) -> f64 {
    let p = diffs.len();
    let md: Vec<Vec<f64>> = diffs.iter().map(|d| mass.mul_vec(d)).collect();
    let g = DMatrix::from_fn(p, p, |i, j| 0.5 * (dot(&diffs[i], &md[j]) + dot(&diffs[j], &md[i])));
    SymmetricEigen::new(g).eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v)).max(0.0).sqrt()
}

impl Objective for FieldObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(gram_sup(&self.differences(to_symmat(x))?, &self.mass))
    }

    fn admissible(&self, x: &[f64]) -> bool {
        to_symmat(x).is_spd()
    }

    fn scale(&self) -> f64 {
        self.scale.sqrt()
    }

    /// A largest eigenvalue: kinks where the top two cross.
    fn smooth(&self) -> bool {
        false
    }
}

pub fn objective_ms(model: &CoarseModel, meas: &Measurements, abar: SymMat) -> Result<f64> {
    FieldObjective::new(model, meas, FieldNorm::Surface)?.value(&abar.to_vec())
}

pub fn objective_mv(model: &CoarseModel, meas: &Measurements, abar: SymMat) -> Result<f64> {
    FieldObjective::new(model, meas, FieldNorm::Volume)?.value(&abar.to_vec())
}

/// Energy gap with the coefficient perturbed by random symmetric noise:
/// `E_ε,p − mean_i E(Ā + η_i, φ_p)`, with `M₁` draws of i.i.d. centered
/// normal entries. The draws come from one seeded stream and are the same at
/// every `Ā` except where a draw must be skipped because `Ā + η` is not
/// positive definite; skipped draws are counted.
pub struct CoefficientNoiseObjective<'a> {
    model: &'a CoarseModel,
    meas: &'a Measurements,
    kind: EnergyObjectiveKind,
    sigma: f64,
    draws: usize,
    seed: u64,
    rejected: Cell<usize>,
}

pub const MAX_REJECTION_RATE: f64 = 0.5;

impl<'a> CoefficientNoiseObjective<'a> {
    pub fn new(
        model: &'a CoarseModel,
        meas: &'a Measurements,
        kind: EnergyObjectiveKind,
        sigma: f64,
        draws: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(sigma >= 0.0) || draws == 0 {
            return Err(Error::invalid("coefficient noise needs σ ≥ 0 and at least one draw"));
        }
        Ok(Self { model, meas, kind, sigma, draws, seed, rejected: Cell::new(0) })
    }

    /// Draws rejected at the last evaluated point.
    pub fn rejected(&self) -> usize {
        self.rejected.get()
    }

    fn perturbations(&self, abar: SymMat) -> Result<Vec<SymMat>> {
        if self.sigma == 0.0 {
            return Ok(vec![abar; 1]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(self.draws);
        let mut rejected = 0;
        while out.len() < self.draws {
            let eta = SymMat::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            let a = abar.add(eta);
            if a.is_spd() {
                out.push(a);
            } else {
                rejected += 1;
                if rejected as f64 > MAX_REJECTION_RATE * (rejected + out.len()) as f64 && rejected >= self.draws {
                    self.rejected.set(rejected);
                    return Err(Error::Aborted(format!(
                        "coefficient noise rejected {rejected} of {} draws at {abar}",
                        rejected + out.len()
                    )));
                }
            }
        }
        self.rejected.set(rejected);
        Ok(out)
    }
}

impl Objective for CoefficientNoiseObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let abar = to_symmat(x);
        if !abar.is_spd() {
            return Err(Error::NotSpd(format!("coefficient {abar} is not positive definite")));
        }
        let samples = self.perturbations(abar)?;
        let m = samples.len() as f64;
        let p = self.meas.len();
        match self.kind {
            EnergyObjectiveKind::PsiSigma => {
                let mut mean = vec![0.0; p];
                for a in samples {
                    for (acc, e) in mean.iter_mut().zip(self.model.energies(a)?) {
                        *acc += e / m;
                    }
                }
                Ok(self.meas.energies.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum())
            }
            EnergyObjectiveKind::PsiMax => {
                let mut mean = vec![vec![0.0; p]; p];
                for a in samples {
                    let c = self.model.cross(a)?;
                    for i in 0..p {
                        for j in 0..p {
                            mean[i][j] += c[i][j] / m;
                        }
                    }
                }
                let state = CoarseState {
                    abar,
                    solutions: vec![],
                    energies: (0..p).map(|i| -0.5 * mean[i][i]).collect(),
                    cross: mean,
                    grams: Default::default(),
                };
                Ok(psi_max(&assemble_m(&state, self.meas).m).0)
            }
        }
    }

    fn admissible(&self, x: &[f64]) -> bool {
        to_symmat(x).is_spd()
    }

    fn scale(&self) -> f64 {
        energy_scale(self.meas)
    }

    fn smooth(&self) -> bool {
        self.kind == EnergyObjectiveKind::PsiSigma
    }
}

/// Options of the Armijo gradient descent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Sufficient-decrease parameter `m`.
    pub armijo: f64,
    pub backtrack: f64,
    /// Initial trial step moves the iterate by this fraction of its norm.
    pub initial_step_fraction: f64,
    pub grad_tol: f64,
    pub max_backtracks: usize,
    /// Start later line searches from the Barzilai–Borwein step instead of
    /// the fixed fraction.
    pub barzilai_borwein: bool,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            armijo: 0.1,
            backtrack: 0.5,
            initial_step_fraction: 0.1,
            grad_tol: 1e-8,
            max_backtracks: 60,
            barzilai_borwein: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientSmall,
    MaxIters,
    LineSearchFailed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub iterates: Vec<Vec<f64>>,
    pub objective_values: Vec<f64>,
    /// Accepted step sizes `μ_k` (one fewer than iterates).
    pub step_sizes: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    /// Positive definiteness of each iterate read as a symmetric matrix
    /// (meaningful for three-parameter problems only).
    pub spd: Vec<bool>,
    pub termination: Termination,
}

impl OptimizerTrace {
    pub fn final_point(&self) -> &[f64] {
        self.iterates.last().expect("trace has an initial point")
    }

    pub fn final_matrix(&self) -> SymMat {
        to_symmat(self.final_point())
    }

    pub fn final_value(&self) -> f64 {
        *self.objective_values.last().expect("trace has an initial value")
    }

    pub fn iterations(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn is_monotone(&self) -> bool {
        self.objective_values.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Armijo gradient descent `x ← x − μ ∇Ψ(x)`.
///
/// Each line search starts from the step that moves `x` by
/// `initial_step_fraction · ‖x‖` (for smooth objectives, after the first
/// iteration, the smaller of that and the Barzilai–Borwein step) and halves
/// it until the sufficient-decrease condition holds; trial points outside the
/// domain count as failures.
/// Iteration stops when `‖∇Ψ‖·‖x‖ / s ≤ tol·(1 + Ψ/s)`, with `s` the
/// objective's characteristic scale, i.e. the plain rule applied to the
/// dimensionless objective `Ψ/s` in relative coordinates.
pub fn descend<O: Objective + ?Sized>(obj: &O, init: &[f64], opts: &DescentOptions) -> Result<OptimizerTrace> {
    if !obj.admissible(init) {
        return Err(Error::NotSpd(format!("initial point {init:?} is not admissible")));
    }
    let scale = obj.scale();
    let mut x = init.to_vec();
    let (mut f, mut g) = obj.value_and_gradient(&x)?;
    let mut trace = OptimizerTrace {
        iterates: vec![x.clone()],
        objective_values: vec![f],
        step_sizes: vec![],
        gradient_norms: vec![norm(&g)],
        spd: vec![x.len() != 3 || to_symmat(&x).is_spd()],
        termination: Termination::MaxIters,
    };
    let mut prev_g = g.clone();
    for _ in 0..opts.max_iters {
        let gn = norm(&g);
        let xn = norm(&x).max(f64::MIN_POSITIVE);
        if gn * xn / scale <= opts.grad_tol * (1.0 + f / scale) {
            trace.termination = Termination::GradientSmall;
            return Ok(trace);
        }
        let mut mu = opts.initial_step_fraction * xn / gn;
        if opts.barzilai_borwein && obj.smooth() && trace.iterates.len() > 1 {
            let prev = &trace.iterates[trace.iterates.len() - 2];
            let s: Vec<f64> = x.iter().zip(prev).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g.iter().zip(&prev_g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            if sy > 0.0 {
                mu = mu.min(s.iter().map(|v| v * v).sum::<f64>() / sy);
            }
        }
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - mu * b).collect();
            if obj.admissible(&trial) {
                let ft = obj.value(&trial)?;
                if ft <= f - opts.armijo * mu * gn * gn {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            mu *= opts.backtrack;
        }
        let Some((xt, _)) = accepted else {
            trace.termination = Termination::LineSearchFailed;
            return Ok(trace);
        };
        x = xt;
        prev_g = g;
        let (fv, gv) = obj.value_and_gradient(&x)?;
        f = fv;
        g = gv;
        trace.iterates.push(x.clone());
        trace.objective_values.push(f);
        trace.step_sizes.push(mu);
        trace.gradient_norms.push(norm(&g));
        trace.spd.push(x.len() != 3 || to_symmat(&x).is_spd());
    }
    let gn = norm(&g);
    if gn * norm(&x) / scale <= opts.grad_tol * (1.0 + f / scale) {
        trace.termination = Termination::GradientSmall;
    }
    Ok(trace)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Result of comparing the energy and surface sup problems over the full
/// discrete boundary space.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeMsCheck {
    /// `½ |μ_max|`, with `μ_max` the largest-magnitude eigenvalue of `T_ε − T_Ā`.
    pub psi_me: f64,
    /// `√λ_max((T_ε − T_Ā)²)`, computed independently of `μ_max`.
    pub psi_ms: f64,
    pub mu_max: f64,
}

/// Compare `Ψ^ME` and `Ψ^MS` on one fine mesh. `T_A` is the discrete
/// Neumann-to-Dirichlet map of coefficient `A`.
pub fn me_ms_identity_check(field: &CoefficientField, abar: SymMat, fine_mesh: &TriMesh) -> Result<MeMsCheck> {
    let t_eps = NeumannSolver::for_field(fine_mesh, field)?;
    let t_bar = NeumannSolver::for_field(fine_mesh, &CoefficientField::constant(abar))?;
    let space = t_eps.space().clone();
    let h = |g: &[f64]| -> Result<Vec<f64>> {
        let a = t_eps.apply_ntd(g)?;
        let b = t_bar.apply_ntd(g)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
    };
    let deflation = Some(Deflation { weights: &space.weights, total: space.perimeter });
    let start = {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_6d73);
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (0..2).map(|_| (0..space.dim()).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>()).collect::<Vec<_>>()
    };
    let tol = 1e-11;
    let first = block_krylov(
        |xs| xs.iter().map(|g| h(g)).collect(),
        &space.mass,
        deflation,
        start.clone(),
        &KrylovOptions { nev: 1, target: Target::LargestMagnitude, tol, max_basis: None },
    )?;
    let mu = first.values[0];
    let squared = block_krylov(
        |xs| xs.iter().map(|g| h(&h(g)?)).collect(),
        &space.mass,
        deflation,
        start,
        &KrylovOptions { nev: 1, target: Target::Largest, tol, max_basis: None },
    )?;
    Ok(MeMsCheck { psi_me: 0.5 * mu.abs(), psi_ms: squared.values[0].max(0.0).sqrt(), mu_max: mu })
}

/// One-dimensional energy `E(a, g) = −¼ ∫₀¹ 1/a` for the datum
/// `g(0) = −g(1) = 2^{-1/2}`, by the composite midpoint rule.
pub fn energy_1d(a: impl Fn(f64) -> f64, points: usize) -> Result<f64> {
    let h = 1.0 / points as f64;
    let mut s = 0.0;
    for k in 0..points {
        let v = a((k as f64 + 0.5) * h);
        if !(v > 0.0) {
            return Err(Error::invalid(format!("coefficient not coercive: a = {v}")));
        }
        s += h / v;
    }
    Ok(-0.25 * s)
}

/// `(E(a_ε) − E(ā))²` over the scalar `ā`; its minimizer is the harmonic mean.
pub struct ScalarEnergyObjective {
    pub measured: f64,
}

impl Objective for ScalarEnergyObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.measured + 0.25 / x[0]).powi(2))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = self.measured + 0.25 / x[0];
        Ok((r * r, vec![-2.0 * r * 0.25 / (x[0] * x[0])]))
    }

    fn admissible(&self, x: &[f64]) -> bool {
        x[0] > 0.0
    }

    fn scale(&self) -> f64 {
        self.measured * self.measured
    }
}

/// `|1/a_* − E[1/(ā + η)]|²` with `η` uniform on `[lo, hi]`; the expectation
/// uses Gauss–Legendre quadrature.
pub struct ScalarCoefficientNoiseObjective {
    pub a_star: f64,
    pub lo: f64,
    pub hi: f64,
    nodes: Vec<(f64, f64)>,
}

impl ScalarCoefficientNoiseObjective {
    pub fn new(a_star: f64, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(hi > lo && lo >= 0.0 && a_star > 0.0) {
            return Err(Error::invalid("need 0 ≤ lo < hi and a_* > 0"));
        }
        let nodes = gauss_legendre(points)
            .into_iter()
            .map(|(t, w)| (lo + 0.5 * (hi - lo) * (t + 1.0), 0.5 * w))
            .collect();
        Ok(Self { a_star, lo, hi, nodes })
    }

    pub fn expectation(&self, abar: f64) -> f64 {
        self.nodes.iter().map(|(eta, w)| w / (abar + eta)).sum()
    }
}

impl Objective for ScalarCoefficientNoiseObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((1.0 / self.a_star - self.expectation(x[0])).powi(2))
    }

    fn admissible(&self, x: &[f64]) -> bool {
        x[0] + self.lo > 0.0 && x[0] > 0.0
    }

    fn scale(&self) -> f64 {
        (1.0 / self.a_star).powi(2)
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut out: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}
