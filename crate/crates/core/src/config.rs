//! Run configuration files and the command-line driver.
//!
//! A configuration is a TOML document with `schema_version = 1`:
//!
//! ```toml
//! schema_version = 1
//! experiment = "sweep"          # homogenize | identify | sweep | noise_measurement
//!                               # | noise_coefficient | one_d_profile | me_ms_check
//! profile = "desk"              # desk | full
//! base_seed = 7
//! epsilons = [0.2, 0.1, 0.05]
//! P = "auto"                    # or an integer
//! Q = 11
//! r = 20                        # fine mesh size h = ε / r
//! coarse_H = 0.05
//! strategies = ["ME", "A_star"]
//!
//! [coefficient]
//! kind = "periodic_paper"       # checkerboard | constant (a11, a12, a22) | layered (base, amplitude)
//!
//! [output]
//! dir = "results"
//! name = "periodic"
//! ```
//!
//! Unset values take the profile's defaults. Every experiment writes
//! `<name>.json`; those producing result rows also write `<name>.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::coefficients::{cells_per_side, CoefficientField, SymMat};
use crate::error::Error;
use crate::experiments::{
    argmin, err_star, fine_subdivisions, grid, noise_coefficient_study, noise_measurement_study, one_d_profile,
    sweep, CoefficientSpec, PipelineOptions, Record, Strategy, SweepSpec,
};
use crate::identify::{
    descend, me_ms_identity_check, CoarseModel, DescentOptions, EnergyObjective, EnergyObjectiveKind, Measurements,
    ScalarCoefficientNoiseObjective,
};
use crate::mesh::{build_unit_square_mesh, subdivisions_for_size};
use crate::modes::{choose_p, compute_r_modes};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "EFFDIFF_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Homogenize,
    Identify,
    Sweep,
    NoiseMeasurement,
    NoiseCoefficient,
    OneDProfile,
    MeMsCheck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl Profile {
    fn r(self, random: bool) -> f64 {
        match (self, random) {
            (Profile::Desk, false) => 20.0,
            (Profile::Desk, true) => 10.0,
            (Profile::Full, false) => 40.0,
            (Profile::Full, true) => 20.0,
        }
    }

    fn m1(self) -> usize {
        match self {
            Profile::Desk => 10,
            Profile::Full => 40,
        }
    }

    fn m2(self) -> usize {
        match self {
            Profile::Desk => 4,
            Profile::Full => 40,
        }
    }

    fn cell_n(self) -> usize {
        match self {
            Profile::Desk => 256,
            Profile::Full => 512,
        }
    }

    /// Fine-mesh node cap.
    pub fn dof_cap(self) -> Option<usize> {
        match self {
            Profile::Desk => Some(4_000_000),
            Profile::Full => None,
        }
    }
}

/// `P` given as a count or `"auto"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeCount {
    Count(usize),
    Auto(String),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub name: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub profile: Option<Profile>,
    #[serde(default)]
    pub coefficient: Option<CoefficientSpec>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default, rename = "P")]
    pub p: Option<ModeCount>,
    #[serde(default, rename = "Q")]
    pub q: Option<usize>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default, rename = "coarse_H")]
    pub coarse_h: Option<f64>,
    #[serde(default, rename = "M1")]
    pub m1: Option<usize>,
    #[serde(default, rename = "M2")]
    pub m2: Option<usize>,
    #[serde(default)]
    pub sigmas: Vec<f64>,
    /// Noise draws per level in the measurement-noise study.
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub cell_n: Option<usize>,
    #[serde(default)]
    pub objective: Option<EnergyObjectiveKind>,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    /// Injected measurements (TOML) for `identify`.
    #[serde(default)]
    pub measurements: Option<PathBuf>,
    /// Fine-mesh subdivisions of `me_ms_check`.
    #[serde(default)]
    pub mesh_n: Option<usize>,
    /// Random `Ā` samples of `me_ms_check`.
    #[serde(default)]
    pub samples: Option<usize>,
    /// Scalar-coefficient grid `[lo, hi, step]` of `one_d_profile`.
    #[serde(default)]
    pub grid: Option<[f64; 3]>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Failures of the driver, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("fine mesh for ε = {epsilon} has {dofs} nodes, above the profile cap of {cap}")]
    DofCap { epsilon: f64, dofs: usize, cap: usize },
    #[error("{failed} case(s) failed")]
    Partial { failed: usize },
    #[error(transparent)]
    Run(#[from] Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NotFound(_) => 2,
            CliError::Schema(_) => 3,
            CliError::DofCap { .. } => 4,
            CliError::Partial { .. } => 5,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::NotFound(_) => "config_not_found",
            CliError::Schema(_) => "schema",
            CliError::DofCap { .. } => "dof_cap",
            CliError::Partial { .. } => "partial_failure",
            CliError::Run(_) => "run",
            CliError::Io(_) => "io",
        }
    }

    /// Machine-readable summary for stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Configuration with every default filled in.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub experiment: Experiment,
    pub profile: Profile,
    pub coefficient: CoefficientSpec,
    pub epsilons: Vec<f64>,
    pub cases: Vec<ResolvedCase>,
    pub q: usize,
    pub r: f64,
    pub coarse_h: f64,
    pub coarse_n: usize,
    pub m1: usize,
    pub m2: usize,
    pub sigmas: Vec<f64>,
    pub draws: usize,
    pub base_seed: u64,
    pub cell_n: usize,
    pub objective: EnergyObjectiveKind,
    pub strategies: Vec<Strategy>,
    pub measurements: Option<PathBuf>,
    pub mesh_n: usize,
    pub samples: usize,
    pub grid: [f64; 3],
    pub max_iters: usize,
    pub out_dir: PathBuf,
    pub name: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedCase {
    pub epsilon: f64,
    #[serde(rename = "P")]
    pub p: usize,
    pub fine_n: usize,
    pub fine_nodes: usize,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::NotFound(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Schema(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

impl RunConfig {
    pub fn resolve(&self, ov: &Overrides) -> Result<Resolved, CliError> {
        let profile = ov.profile.or(self.profile).unwrap_or_default();
        let coefficient = self.coefficient.clone().unwrap_or(match self.experiment {
            Experiment::OneDProfile => CoefficientSpec::Layered { base: 2.0, amplitude: 1.0 },
            _ => CoefficientSpec::PeriodicPaper,
        });
        let random = coefficient.is_random();
        let epsilons = if self.epsilons.is_empty() {
            match self.experiment {
                Experiment::Sweep => vec![0.2, 0.1, 0.05],
                Experiment::Identify | Experiment::NoiseMeasurement | Experiment::NoiseCoefficient => vec![0.05],
                Experiment::MeMsCheck => vec![0.2],
                Experiment::OneDProfile => vec![1e-3],
                Experiment::Homogenize => vec![],
            }
        } else {
            self.epsilons.clone()
        };
        if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(schema(format!("epsilon {e} must lie in (0, 1]")));
        }
        let q = self.q.unwrap_or(11);
        let r = self.r.unwrap_or(profile.r(random));
        let coarse_h = self.coarse_h.unwrap_or(0.05);
        if !(r > 0.0) || !(coarse_h > 0.0 && coarse_h < 1.5) {
            return Err(schema("r and coarse_H must be positive (coarse_H below 1.5)"));
        }
        let coarse_n = subdivisions_for_size(coarse_h);
        let mut cases = Vec::new();
        for &eps in &epsilons {
            let p = match &self.p {
                None => choose_p(eps),
                Some(ModeCount::Count(p)) if *p >= 1 => *p,
                Some(ModeCount::Auto(s)) if s == "auto" => choose_p(eps),
                Some(other) => return Err(schema(format!("P must be a positive count or \"auto\", got {other:?}"))),
            };
            let uses_q = matches!(self.experiment, Experiment::Sweep | Experiment::Identify);
            if uses_q && q < p {
                return Err(schema(format!("Q = {q} is smaller than P = {p} at ε = {eps}")));
            }
            let align = match coefficient {
                CoefficientSpec::Checkerboard => {
                    let c = cells_per_side(eps);
                    ((c as f64 * eps - 1.0).abs() < 1e-9).then_some(c)
                }
                _ => None,
            };
            let fine_n = match self.experiment {
                Experiment::MeMsCheck => self.mesh_n.unwrap_or(128),
                Experiment::OneDProfile | Experiment::Homogenize => 0,
                _ => fine_subdivisions(eps, r, coarse_n, align),
            };
            let fine_nodes = if fine_n == 0 { 0 } else { (fine_n + 1) * (fine_n + 1) };
            if let Some(cap) = profile.dof_cap() {
                if fine_nodes > cap {
                    return Err(CliError::DofCap { epsilon: eps, dofs: fine_nodes, cap });
                }
            }
            cases.push(ResolvedCase { epsilon: eps, p, fine_n, fine_nodes });
        }
        let m1 = self.m1.unwrap_or(profile.m1());
        let m2 = self.m2.unwrap_or(profile.m2());
        if m1 == 0 || (random && matches!(self.experiment, Experiment::Sweep) && m2 < 1) {
            return Err(schema("M1 and M2 must be positive"));
        }
        let sigmas = if self.sigmas.is_empty() {
            match self.experiment {
                Experiment::NoiseCoefficient => vec![2.0],
                _ => vec![0.01, 0.05, 0.1],
            }
        } else {
            self.sigmas.clone()
        };
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(schema("noise levels must be non-negative"));
        }
        let strategies = if self.strategies.is_empty() {
            match self.experiment {
                Experiment::Sweep => vec![Strategy::Me, Strategy::Ms, Strategy::AStar],
                _ => vec![Strategy::Me, Strategy::AStar],
            }
        } else {
            self.strategies.clone()
        };
        let grid = self.grid.unwrap_or([1.0, 3.0, 1e-3]);
        if !(grid[0] > 0.0 && grid[1] > grid[0] && grid[2] > 0.0) {
            return Err(schema("grid must be [lo, hi, step] with 0 < lo < hi and step > 0"));
        }
        let out_dir = ov
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        let name = self.output.name.clone().unwrap_or_else(|| {
            serde_json::to_value(self.experiment).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
        });
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(schema("output.name must be a plain file stem"));
        }
        Ok(Resolved {
            experiment: self.experiment,
            profile,
            coefficient,
            epsilons,
            cases,
            q,
            r,
            coarse_h,
            coarse_n,
            m1,
            m2,
            sigmas,
            draws: self.draws.unwrap_or(40),
            base_seed: ov.seed.unwrap_or(self.base_seed),
            cell_n: self.cell_n.unwrap_or(profile.cell_n()),
            objective: self.objective.unwrap_or(EnergyObjectiveKind::PsiSigma),
            strategies,
            measurements: self.measurements.clone(),
            mesh_n: self.mesh_n.unwrap_or(128),
            samples: self.samples.unwrap_or(5),
            grid,
            max_iters: self.max_iters.unwrap_or(200),
            out_dir,
            name,
        })
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Records as CSV with the documented header.
pub fn records_csv(records: &[Record]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record([
            "experiment", "strategy", "epsilon", "P", "Q", "r", "seed", "a11", "a12", "a22", "err_star",
            "err_eps_q", "psi_final", "iters", "wall_ms",
        ])
        .map_err(|e| CliError::Io(e.into()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| CliError::Io(e.into()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

/// Plain table with a header row.
fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Io(e.into()))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::Io(e.into()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

/// What a run produced.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub failures: usize,
}

pub fn run(res: &Resolved) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let opts = PipelineOptions {
        objective: res.objective,
        descent: DescentOptions { max_iters: res.max_iters, ..Default::default() },
        strategies: res.strategies.clone(),
        quality: true,
    };
    let sweep_spec = |epsilons: Vec<f64>, p: Option<usize>| SweepSpec {
        coefficient: res.coefficient.clone(),
        epsilons,
        p,
        q: res.q,
        r: res.r,
        coarse_h: res.coarse_h,
        m1: res.m1,
        m2: res.m2,
        base_seed: res.base_seed,
        cell_n: res.cell_n,
    };
    let fixed_p = |eps: f64| res.cases.iter().find(|c| c.epsilon == eps).map(|c| c.p);
    let mut records: Option<Vec<Record>> = None;
    let mut tables: Vec<(String, Vec<u8>)> = Vec::new();
    let mut failures = Vec::<(f64, String)>::new();
    let summary = match res.experiment {
        Experiment::Homogenize => {
            let h = res.coefficient.reference(res.cell_n)?;
            records = Some(vec![Record {
                experiment: "homogenize".into(),
                strategy: "A_star".into(),
                epsilon: 0.0,
                p: 0,
                q: 0,
                r: 0.0,
                seed: res.base_seed,
                a11: h.matrix.a11,
                a12: h.matrix.a12,
                a22: h.matrix.a22,
                err_star: None,
                err_eps_q: None,
                psi_final: None,
                iters: None,
                wall_ms: started.elapsed().as_millis() as u64,
            }]);
            json!({ "reference": h, "cell_n": res.cell_n })
        }
        Experiment::Sweep => {
            let mut all = sweep_spec(vec![], None);
            let mut out = crate::experiments::SweepResult::default();
            for c in &res.cases {
                all.epsilons = vec![c.epsilon];
                all.p = Some(c.p);
                let r = sweep(&all, &opts)?;
                out.records.extend(r.records);
                out.ensembles.extend(r.ensembles);
                out.failures.extend(r.failures);
                out.reference = r.reference;
            }
            failures = out.failures.clone();
            records = Some(out.records.clone());
            json!({ "reference": out.reference, "ensembles": out.ensembles, "failures": out.failures })
        }
        Experiment::Identify => {
            let eps = res.epsilons[0];
            let p = fixed_p(eps).expect("resolved case");
            if let Some(path) = &res.measurements {
                let (recs, info) = identify_injected(res, path, p)?;
                records = Some(recs);
                info
            } else {
                let r = sweep(&sweep_spec(vec![eps], Some(p)), &opts)?;
                failures = r.failures.clone();
                let mut recs = r.records;
                recs.iter_mut().for_each(|x| x.experiment = "identify".into());
                records = Some(recs);
                json!({ "reference": r.reference, "ensembles": r.ensembles, "failures": r.failures })
            }
        }
        Experiment::NoiseMeasurement => {
            let mut studies = Vec::new();
            let mut recs = Vec::new();
            let mut rows = Vec::new();
            for c in &res.cases {
                match noise_measurement_study(&sweep_spec(vec![], Some(c.p)), c.epsilon, &res.sigmas, res.draws, &opts) {
                    Ok(s) => {
                        for l in &s.levels {
                            let (lo, hi) = l.stat.map_or((l.mean_error, l.mean_error), |s| (s.ci95_low, s.ci95_high));
                            rows.push(vec![c.epsilon, l.sigma, l.mean_error, lo, hi, l.errors.len() as f64]);
                        }
                        recs.extend(s.records.iter().cloned());
                        studies.push(json!({
                            "epsilon": s.epsilon, "noiseless": s.noiseless, "fit": s.fit,
                            "levels": s.levels.iter().map(|l| json!({
                                "sigma": l.sigma, "mean_error": l.mean_error, "ci95": l.stat,
                            })).collect::<Vec<_>>(),
                        }));
                    }
                    Err(e) => failures.push((c.epsilon, e.to_string())),
                }
            }
            records = Some(recs);
            tables.push((
                format!("{}_summary.csv", res.name),
                table_csv(&["epsilon", "sigma", "mean_error", "ci95_low", "ci95_high", "draws"], &rows)?,
            ));
            json!({ "studies": studies, "failures": failures })
        }
        Experiment::NoiseCoefficient => {
            let one_d = one_d_noise();
            let mut studies = Vec::new();
            let mut recs = Vec::new();
            for c in &res.cases {
                for &sigma in &res.sigmas {
                    match noise_coefficient_study(&sweep_spec(vec![], Some(c.p)), c.epsilon, sigma, res.m1, &opts) {
                        Ok(s) => {
                            recs.extend(s.records.iter().cloned());
                            studies.push(json!({
                                "epsilon": s.epsilon, "sigma": s.sigma, "draws": s.draws,
                                "noiseless": s.noiseless, "noisy": s.noisy,
                                "relative_difference": s.relative_difference, "rejected": s.rejected,
                            }));
                        }
                        Err(e) => failures.push((c.epsilon, e.to_string())),
                    }
                }
            }
            records = Some(recs);
            json!({ "one_d": one_d?, "studies": studies, "failures": failures })
        }
        Experiment::OneDProfile => {
            let eps = res.epsilons[0];
            let field = one_d_field(&res.coefficient)?;
            let a = |y: f64| field.eval([0.0, y / eps]).a11;
            let points = one_d_points(eps);
            let g = grid(res.grid[0], res.grid[1], res.grid[2]);
            let prof = one_d_profile(a, &g, points)?;
            let (amin, vmin) = argmin(&prof).ok_or_else(|| schema("empty grid"))?;
            let h = crate::homogenization::harmonic_mean_1d(a, points)?;
            tables.push((
                format!("{}.csv", res.name),
                table_csv(&["abar", "psi"], &prof.iter().map(|(a, v)| vec![*a, *v]).collect::<Vec<_>>())?,
            ));
            json!({ "epsilon": eps, "argmin": amin, "min": vmin, "harmonic_mean": h, "points": points })
        }
        Experiment::MeMsCheck => {
            let eps = res.epsilons[0];
            let mesh = build_unit_square_mesh(res.mesh_n)?;
            let field = res.coefficient.field(eps, res.base_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(res.base_seed);
            let mut rows = Vec::new();
            for _ in 0..res.samples {
                let abar = random_spd(&mut rng, 2.0, 25.0);
                let c = me_ms_identity_check(&field, abar, &mesh)?;
                rows.push(vec![abar.a11, abar.a12, abar.a22, c.psi_me, c.psi_ms, c.psi_ms / c.psi_me]);
            }
            tables.push((
                format!("{}.csv", res.name),
                table_csv(&["a11", "a12", "a22", "psi_me", "psi_ms", "ratio"], &rows)?,
            ));
            let worst = rows.iter().map(|r| (r[5] - 2.0).abs() / 2.0).fold(0.0f64, f64::max);
            json!({ "epsilon": eps, "mesh_n": res.mesh_n, "rows": rows, "worst_relative_deviation": worst })
        }
    };
    let mut files = Vec::new();
    if let Some(recs) = &records {
        let path = res.out_dir.join(format!("{}.csv", res.name));
        write_atomic(&path, &records_csv(recs)?)?;
        files.push(path);
    }
    for (name, bytes) in tables {
        let path = res.out_dir.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
    }
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "config": res,
        "summary": summary,
        "records": records,
    });
    let path = res.out_dir.join(format!("{}.json", res.name));
    write_atomic(&path, serde_json::to_string_pretty(&doc).expect("json").as_bytes())?;
    files.push(path);
    Ok(Outcome { files, failures: failures.len() })
}

/// Scalar coefficient of the one-dimensional study: the layered field
/// varies along `x₂` only, so its restriction to a vertical line is `a(y)`.
fn one_d_field(spec: &CoefficientSpec) -> Result<CoefficientField, CliError> {
    match spec {
        CoefficientSpec::Layered { base, amplitude } => {
            Ok(CoefficientField::Layered { base: *base, amplitude: *amplitude })
        }
        CoefficientSpec::Constant { a11, .. } => Ok(CoefficientField::constant(SymMat::scalar(*a11))),
        other => Err(schema(format!("one_d_profile needs a layered or constant coefficient, got {other:?}"))),
    }
}

/// Midpoint points for a `1/ε`-periodic integrand: 64 per period.
fn one_d_points(eps: f64) -> usize {
    ((64.0 / eps).round() as usize).max(64)
}

/// One-dimensional coefficient-noise optimum: descent and grid search.
fn one_d_noise() -> Result<serde_json::Value, CliError> {
    let obj = ScalarCoefficientNoiseObjective::new(8.0, 2.0, 4.0, 32)?;
    let t = descend(&obj, &[8.0], &DescentOptions::default())?;
    let g = grid(1e-4, 20.0, 1e-4);
    let best = g
        .iter()
        .map(|&a| (a, (0.125 - obj.expectation(a)).powi(2)))
        .reduce(|b, p| if p.1 < b.1 { p } else { b })
        .expect("grid is not empty");
    let e = (0.25f64).exp();
    Ok(json!({
        "descent": t.final_point()[0],
        "grid": best.0,
        "closed_form": (4.0 - 2.0 * e) / (e - 1.0),
        "iters": t.iterations(),
    }))
}

/// Random SPD matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(rng: &mut impl Rng, lo: f64, hi: f64) -> SymMat {
    let l1 = rng.random_range(lo..hi);
    let l2 = rng.random_range(lo..hi);
    let th = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (th.cos(), th.sin());
    SymMat::new(l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c)
}

fn identify_injected(res: &Resolved, path: &Path, p: usize) -> Result<(Vec<Record>, serde_json::Value), CliError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::NotFound(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    let coarse = std::sync::Arc::new(build_unit_square_mesh(res.coarse_n)?);
    let basis = compute_r_modes(&coarse, p)?;
    let meas = Measurements::from_toml(&text, &basis)?;
    let model = CoarseModel::new(coarse, basis.truncated(meas.len()))?;
    let init = res.coefficient.initial_guess()?;
    let started = Instant::now();
    let t = descend(
        &EnergyObjective::new(&model, &meas, res.objective)?,
        &init.to_vec(),
        &DescentOptions { max_iters: res.max_iters, ..Default::default() },
    )?;
    let a = t.final_matrix();
    let reference = res.coefficient.reference(res.cell_n)?.matrix;
    let rec = Record {
        experiment: "identify".into(),
        strategy: "ME".into(),
        epsilon: res.epsilons[0],
        p: meas.len(),
        q: meas.len(),
        r: res.r,
        seed: res.base_seed,
        a11: a.a11,
        a12: a.a12,
        a22: a.a22,
        err_star: Some(err_star(a, reference)),
        err_eps_q: None,
        psi_final: Some(t.final_value()),
        iters: Some(t.iterations()),
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok((vec![rec], json!({ "measurements": path, "termination": t.termination })))
}

/// Resolved settings shown by `--validate`.
pub fn validation_report(res: &Resolved) -> String {
    let mut m = BTreeMap::new();
    m.insert("resolved", serde_json::to_value(res).expect("json"));
    serde_json::to_string_pretty(&m).expect("json")
}

/// Entry point shared by the binary and the tests: returns the exit code.
pub fn main_with(config: &Path, validate_only: bool, ov: &Overrides) -> i32 {
    let result = load(config).and_then(|cfg| cfg.resolve(ov)).and_then(|res| {
        if validate_only {
            println!("{}", validation_report(&res));
            return Ok(());
        }
        let out = run(&res)?;
        for f in &out.files {
            eprintln!("wrote {}", f.display());
        }
        if out.failures > 0 {
            return Err(CliError::Partial { failed: out.failures });
        }
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
