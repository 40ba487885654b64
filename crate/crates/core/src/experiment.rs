//! Experiment configuration and the pipeline stages behind the command line
//! driver: collect, overapproximate, synthesize, verify and report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark;
use crate::consistency::{self, ConsistencyError, EllipsoidModel, MembershipReport, RankReport};
use crate::data::{self, DataError, Dataset, DatasetMeta, Signal, SignalSpec, TrueSystem};
use crate::poly::FunctionLibrary;
use crate::sdp::SolverConfig;
use crate::synth::{self, Certificate, CertificateKind, FrozenReport, SynthConfig, SynthError};
use crate::verify::{self, PdCheck, SampleReport, SamplingConfig, SandwichReport, VerifyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{file} was produced by config {found}, current config is {expected}")]
    HashMismatch { file: String, expected: String, found: String },
    #[error("missing input {0}; run the earlier stage first")]
    Missing(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

impl ExperimentError {
    /// Process exit code: 2 for infeasible programs, 4 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Consistency(ConsistencyError::Infeasible { .. }) => 2,
            ExperimentError::Synth(SynthError::Infeasible(_)) => 2,
            _ => 4,
        }
    }
}

/// Coefficients of the data-generating system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(with = "crate::serde_mat")]
    pub a_star: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b_star: DMatrix<f64>,
}

/// Data-collection protocol: one trajectory per initial state, sampled
/// uniformly over `[0, horizon]`, all concatenated into one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    pub initial_states: Vec<Vec<f64>>,
    pub horizon: f64,
    pub samples_per_trajectory: usize,
    pub step: f64,
    pub input: SignalSpec,
    pub noise: SignalSpec,
}

/// Per-program library and synthesis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramConfig {
    /// Library with the `Ẑ`, `H` factorization for the convex programs;
    /// the experiment library when absent.
    #[serde(default)]
    pub library: Option<FunctionLibrary>,
    pub synth: SynthConfig,
}

/// Closed-loop run behind the dissipation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub step: f64,
    pub disturbance: SignalSpec,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Regressors `Z`, `W` shared by data, model and the biconvex programs.
    pub library: FunctionLibrary,
    #[serde(default)]
    pub system: Option<SystemSpec>,
    /// Existing dataset CSV (metadata JSON next to it with extension `json`).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub delta: f64,
    pub collection: CollectionConfig,
    pub programs: BTreeMap<String, ProgramConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub trace: TraceConfig,
    #[serde(default)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Two-state benchmark: ten trajectories from a ring of radius `2√2`
    /// through `(2, −2)`, five samples each over two seconds, `δ = 1`.
    pub fn benchmark() -> Self {
        let r = 2.0 * std::f64::consts::SQRT_2;
        let initial_states = (0..10)
            .map(|j| {
                let ang = -std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * j as f64 / 10.0;
                vec![r * ang.cos(), r * ang.sin()]
            })
            .collect();
        let mut programs = BTreeMap::new();
        for kind in CertificateKind::ALL {
            let library = match kind {
                CertificateKind::IssProcessConvex => Some(benchmark::process_library()),
                k if k.is_convex() => Some(benchmark::actuator_library()),
                _ => None,
            };
            let mut synth = SynthConfig::for_kind(kind, library.as_ref().unwrap_or(&benchmark::library()));
            match kind {
                CertificateKind::IssActuatorConvex | CertificateKind::ModelBased => {
                    synth.xi = Some(benchmark::actuator_xi())
                }
                CertificateKind::IssProcessConvex => synth.xi = Some(benchmark::process_xi()),
                _ => synth.initial_guess_k = benchmark::initial_controller(),
            }
            programs.insert(kind.program().to_string(), ProgramConfig { library, synth });
        }
        ExperimentConfig {
            seed: 3,
            library: benchmark::library(),
            system: Some(SystemSpec { a_star: benchmark::a_star(), b_star: benchmark::b_star() }),
            dataset: None,
            delta: 1.0,
            collection: CollectionConfig {
                initial_states,
                horizon: 2.0,
                samples_per_trajectory: 5,
                step: 1e-3,
                input: SignalSpec::InterpolatedGaussian { mean: 0.0, variance: 1.0, knot_spacing: 0.5 },
                noise: SignalSpec::InterpolatedUniformBall { radius: 1.0, knot_spacing: 0.5 },
            },
            programs,
            solver: SolverConfig::default(),
            sampling: SamplingConfig::default(),
            trace: TraceConfig {
                x0: benchmark::x0(),
                horizon: 10.0,
                step: 1e-3,
                disturbance: SignalSpec::InterpolatedUniformBall { radius: 1.0, knot_spacing: 0.5 },
                tolerance: 1e-6,
            },
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form with `out_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let v = serde_json::to_value(&c).expect("config serializes");
        crate::sha256_hex(v.to_string().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.library.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if let Some(s) = &self.system {
            self.true_system_from(s)?;
        }
        for name in self.programs.keys() {
            if CertificateKind::from_program(name).is_none() {
                return Err(ExperimentError::Config(format!("unknown program {name:?}")));
            }
        }
        let t = &self.trace;
        if !(t.step > 0.0 && t.horizon >= t.step) || t.x0.len() != self.library.nvars {
            return bad("trace needs step > 0, horizon >= step and an x0 of state dimension");
        }
        Ok(())
    }

    fn validate_collection(&self) -> Result<(), ExperimentError> {
        let c = &self.collection;
        if c.initial_states.is_empty() || c.samples_per_trajectory == 0 {
            return Err(ExperimentError::Config("collection needs at least one sample (T >= 1)".into()));
        }
        if !(c.step > 0.0 && c.horizon >= c.step) {
            return Err(ExperimentError::Config("collection needs step > 0 and horizon >= step".into()));
        }
        if c.initial_states.iter().any(|x| x.len() != self.library.nvars) {
            return Err(ExperimentError::Config("initial states must have the state dimension".into()));
        }
        Ok(())
    }

    fn true_system_from(&self, s: &SystemSpec) -> Result<TrueSystem, ExperimentError> {
        TrueSystem::new(s.a_star.clone(), s.b_star.clone(), self.library.clone())
            .map_err(|e| ExperimentError::Config(format!("system: {e}")))
    }

    pub fn true_system(&self) -> Result<TrueSystem, ExperimentError> {
        match &self.system {
            Some(s) => self.true_system_from(s),
            None => Err(ExperimentError::Config("this stage needs a system spec (a_star, b_star)".into())),
        }
    }

    /// Library and synthesis settings for `kind`.
    pub fn program(&self, kind: CertificateKind) -> Result<(FunctionLibrary, SynthConfig), ExperimentError> {
        let (lib, synth) = match self.programs.get(kind.program()) {
            Some(p) => (p.library.clone().unwrap_or_else(|| self.library.clone()), p.synth.clone()),
            None => {
                let cfg = SynthConfig::for_kind(kind, &self.library);
                (self.library.clone(), cfg)
            }
        };
        if kind.is_convex() && lib.zhat.is_none() {
            return Err(ExperimentError::Config(format!("{} needs a library with a Zhat factorization", kind.program())));
        }
        if !kind.is_convex() && synth.initial_guess_k.is_empty() {
            return Err(ExperimentError::Config(format!("{} needs an initial controller guess", kind.program())));
        }
        synth.validate()?;
        Ok((lib, synth))
    }

    pub fn paths(&self) -> Paths {
        Paths { dir: self.out_dir.clone() }
    }
}

/// File layout of an output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn dataset_csv(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn dataset_meta(&self) -> PathBuf {
        self.dir.join("dataset.json")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.json")
    }
    pub fn certificate(&self, kind: CertificateKind) -> PathBuf {
        self.dir.join(format!("{}.cert.json", kind.program()))
    }
    pub fn trace(&self, kind: CertificateKind) -> PathBuf {
        self.dir.join(format!("{}.trace.csv", kind.program()))
    }
    pub fn verification(&self, kind: CertificateKind) -> PathBuf {
        self.dir.join(format!("{}.verify.json", kind.program()))
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.md")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExperimentError::Missing(path.display().to_string()),
        _ => io_err(path)(e),
    })?;
    serde_json::from_slice(&bytes).map_err(|source| ExperimentError::Json { path: path.display().to_string(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| ExperimentError::Json { path: path.display().to_string(), source })?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn check_hash(file: &Path, expected: &str, found: &str) -> Result<(), ExperimentError> {
    if expected != found {
        return Err(ExperimentError::HashMismatch {
            file: file.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))
}

/// Simulates every configured trajectory and samples it; deterministic in
/// the seed.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    cfg.validate_collection()?;
    let sys = cfg.true_system()?;
    let c = &cfg.collection;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let times = data::uniform_sample_times(c.horizon, c.samples_per_trajectory);
    let mut parts = Vec::with_capacity(c.initial_states.len());
    for x0 in &c.initial_states {
        let u = c.input.realize(sys.m(), c.horizon, &mut rng)?;
        let d = c.noise.realize(sys.n(), c.horizon, &mut rng)?;
        let traj = data::integrate_trajectory(&sys, x0, &u, &d, c.horizon, c.step)?;
        if traj.diverged {
            return Err(ExperimentError::Config(format!("trajectory from {x0:?} diverged during collection")));
        }
        parts.push(data::collect_dataset(&sys, &traj, &u, &d, &times, cfg.delta)?);
    }
    Ok(Dataset::concat(parts)?)
}

/// Collect stage: writes `dataset.csv` and `dataset.json`.
pub fn collect(cfg: &ExperimentConfig) -> Result<(Dataset, DatasetMeta), ExperimentError> {
    if cfg.dataset.is_some() {
        return Err(ExperimentError::Config("collect needs a system spec and no dataset path".into()));
    }
    let ds = generate_dataset(cfg)?;
    ensure_out_dir(cfg)?;
    let p = cfg.paths();
    let meta = data::write_dataset(&ds, &p.dataset_csv(), &p.dataset_meta(), cfg.seed, &cfg.hash())?;
    Ok((ds, meta))
}

/// Dataset for the overapproximation: the configured path, or the collect
/// output whose config hash must match.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, DatasetMeta), ExperimentError> {
    let (csv, meta, own) = match &cfg.dataset {
        Some(path) => (path.clone(), path.with_extension("json"), false),
        None => (cfg.paths().dataset_csv(), cfg.paths().dataset_meta(), true),
    };
    for f in [&csv, &meta] {
        if !f.exists() {
            return Err(ExperimentError::Missing(f.display().to_string()));
        }
    }
    let (ds, meta_v) = data::read_dataset(&csv, &meta)?;
    if own {
        check_hash(&meta, &cfg.hash(), &meta_v.config_hash)?;
    }
    let bytes = std::fs::read(&csv).map_err(io_err(&csv))?;
    if crate::sha256_hex(&bytes) != meta_v.csv_sha256 {
        return Err(ExperimentError::Config(format!("{} does not match the checksum in its metadata", csv.display())));
    }
    Ok((ds, meta_v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config_hash: String,
    pub dataset_hash: String,
    pub rank: RankReport,
    /// Membership of the data-generating system, when it is known.
    pub membership: Option<MembershipReport>,
    pub solve_time: f64,
    pub model: EllipsoidModel,
}

/// Overapproximation stage: rank check, then the max-det program.
/// `on_rank` sees the rank report before the solve starts.
pub fn overapproximate(cfg: &ExperimentConfig, on_rank: impl FnOnce(&RankReport)) -> Result<ModelFile, ExperimentError> {
    let (ds, meta) = load_dataset(cfg)?;
    let rank = consistency::rank_check(&ds, &cfg.library)?;
    on_rank(&rank);
    let start = Instant::now();
    let quadrics = consistency::build_sample_quadrics(&ds, &cfg.library)?;
    let mut model = consistency::solve_overapproximation(&quadrics, &cfg.solver)?;
    let solve_time = start.elapsed().as_secs_f64();
    let config_hash = cfg.hash();
    model.config_hash = config_hash.clone();
    model.dataset_hash = meta.csv_sha256.clone();
    let membership = match &cfg.system {
        Some(_) => Some(consistency::membership_ellipsoid(&cfg.true_system()?.ab(), &model)?),
        None => None,
    };
    let file = ModelFile { config_hash, dataset_hash: meta.csv_sha256, rank, membership, solve_time, model };
    ensure_out_dir(cfg)?;
    write_json(&cfg.paths().model(), &file)?;
    Ok(file)
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<ModelFile, ExperimentError> {
    let path = cfg.paths().model();
    let file: ModelFile = read_json(&path)?;
    check_hash(&path, &cfg.hash(), &file.config_hash)?;
    file.model.validate()?;
    Ok(file)
}

/// Outcome of one synthesis run; written whether or not it succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub config_hash: String,
    pub program: String,
    pub feasible: bool,
    pub message: String,
    pub wall_time: f64,
    pub certificate: Option<Certificate>,
}

/// Synthesis stage for one program.
pub fn synthesize(cfg: &ExperimentConfig, kind: CertificateKind) -> Result<CertificateFile, ExperimentError> {
    let (lib, synth_cfg) = cfg.program(kind)?;
    let config_hash = cfg.hash();
    let model = match kind {
        CertificateKind::ModelBased => None,
        _ => Some(load_model(cfg)?),
    };
    let sys = match kind {
        CertificateKind::ModelBased => Some(cfg.true_system()?),
        _ => None,
    };
    let start = Instant::now();
    let result = match (&model, &sys) {
        (_, Some(sys)) => synth::synth_modelbased_convex(sys, &lib, &synth_cfg, &cfg.solver),
        (Some(m), None) => {
            let m = &m.model;
            match kind {
                CertificateKind::Gas => synth::synth_gas(m, &lib, &synth_cfg, &cfg.solver),
                CertificateKind::IssActuatorBiconvex => synth::synth_iss_actuator_biconvex(m, &lib, &synth_cfg, &cfg.solver),
                CertificateKind::IssProcessBiconvex => synth::synth_iss_process_biconvex(m, &lib, &synth_cfg, &cfg.solver),
                CertificateKind::IssActuatorConvex => synth::synth_iss_actuator_convex(m, &lib, &synth_cfg, &cfg.solver),
                _ => synth::synth_iss_process_convex(m, &lib, &synth_cfg, &cfg.solver),
            }
        }
        (None, None) => unreachable!("every program has a model or a system"),
    };
    let wall_time = start.elapsed().as_secs_f64();
    ensure_out_dir(cfg)?;
    let path = cfg.paths().certificate(kind);
    let program = kind.program().to_string();
    match result {
        Ok(mut cert) => {
            cert.config_hash = config_hash.clone();
            if let Some(m) = &model {
                cert.model_hash = crate::sha256_hex(&serde_json::to_vec(&m.model).expect("model serializes"));
                cert.dataset_hash = m.dataset_hash.clone();
            }
            let file = CertificateFile {
                config_hash,
                program,
                feasible: true,
                message: "certificate returned".into(),
                wall_time,
                certificate: Some(cert),
            };
            write_json(&path, &file)?;
            Ok(file)
        }
        Err(e @ SynthError::Infeasible(_)) => {
            let file = CertificateFile { config_hash, program, feasible: false, message: e.to_string(), wall_time, certificate: None };
            write_json(&path, &file)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn load_certificate(cfg: &ExperimentConfig, kind: CertificateKind) -> Result<CertificateFile, ExperimentError> {
    let path = cfg.paths().certificate(kind);
    let file: CertificateFile = read_json(&path)?;
    check_hash(&path, &cfg.hash(), &file.config_hash)?;
    if let Some(c) = &file.certificate {
        check_hash(&path, &cfg.hash(), &c.config_hash)?;
        if c.kind != kind {
            return Err(ExperimentError::Config(format!("{} holds a {} certificate", path.display(), c.kind.program())));
        }
    }
    Ok(file)
}

/// Summary of the closed-loop trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub min_margin: f64,
    pub fd_mismatch: f64,
    pub diverged: bool,
    pub final_norm: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationFile {
    pub config_hash: String,
    pub program: String,
    /// Every stored Gram certificate re-expands to its target.
    pub sos_pass: bool,
    pub invariants: Result<(), String>,
    pub trace: TraceSummary,
    pub samples: SampleReport,
    pub sandwich: SandwichReport,
    pub frozen: Option<FrozenReport>,
    pub pd: Option<PdCheck>,
    pub pass: bool,
}

/// Closed-loop dissipation trace of `cert` on the true system.
pub fn run_trace(
    cfg: &ExperimentConfig,
    cert: &Certificate,
) -> Result<(verify::DissipationTrace, TraceSummary), ExperimentError> {
    let sys = cfg.true_system()?;
    let t = &cfg.trace;
    let e = cert.exo_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exo = if e == 0 { Signal::zero(0) } else { t.disturbance.realize(e, t.horizon, &mut rng)? };
    let traj = verify::simulate_closed_loop(&sys, cert, &exo, &t.x0, t.horizon, t.step)?;
    let trace = verify::dissipation_trace(&traj, &sys, cert, &exo)?;
    let summary = TraceSummary {
        min_margin: trace.min_margin(),
        fd_mismatch: trace.fd_mismatch,
        diverged: trace.diverged,
        final_norm: traj.final_state().norm(),
        pass: trace.passes(t.tolerance),
    };
    Ok((trace, summary))
}

/// Verification stage for one program. Fails with a configuration error
/// when the certificate was produced under a different config.
pub fn verify_program(cfg: &ExperimentConfig, kind: CertificateKind) -> Result<VerificationFile, ExperimentError> {
    let file = load_certificate(cfg, kind)?;
    let Some(cert) = file.certificate else {
        return Err(ExperimentError::Missing(format!("{} certificate (program was infeasible)", kind.program())));
    };
    let (lib, _) = cfg.program(kind)?;
    let sos_pass = cert.reverify().iter().all(|(_, r)| r.pass);
    let invariants = cert.check_invariants();
    let (trace, trace_summary) = run_trace(cfg, &cert)?;
    let tp = cfg.paths().trace(kind);
    let f = std::fs::File::create(&tp).map_err(io_err(&tp))?;
    trace.write_csv(std::io::BufWriter::new(f))?;
    let (samples, frozen) = match kind {
        CertificateKind::ModelBased => (verify::model_sample_check(&cert, &cfg.true_system()?.ab(), &lib, &cfg.sampling)?, None),
        _ => {
            let model = load_model(cfg)?.model;
            let samples = verify::robust_sample_check(&cert, &model, &lib, &cfg.sampling)?;
            let frozen = match kind {
                CertificateKind::IssActuatorBiconvex | CertificateKind::IssProcessBiconvex => {
                    Some(synth::frozen_gas_check(&cert, &model, &lib)?)
                }
                _ => None,
            };
            (samples, frozen)
        }
    };
    let sandwich = verify::sandwich_check(&cert, &cfg.sampling)?;
    let pd = match &cert.convex {
        Some(c) => Some(verify::check_pd_ru(&c.zhat, &c.p, &c.xi, &cfg.solver)?),
        None => None,
    };
    let pass = sos_pass
        && invariants.is_ok()
        && trace_summary.pass
        && samples.pass
        && sandwich.pass
        && frozen.as_ref().is_none_or(|f| f.pass)
        && pd.as_ref().is_none_or(|p| p.pass);
    let out = VerificationFile {
        config_hash: cfg.hash(),
        program: kind.program().to_string(),
        sos_pass,
        invariants,
        trace: trace_summary,
        samples,
        sandwich,
        frozen,
        pd,
        pass,
    };
    write_json(&cfg.paths().verification(kind), &out)?;
    Ok(out)
}

/// One row of the consolidated report; `None` marks a gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub program: String,
    pub status: String,
    pub decision_variables: Option<usize>,
    pub gram_variables: Option<usize>,
    pub scalar_constraints: Option<usize>,
    pub sos_constraints: Option<usize>,
    pub matrix_constraints: Option<Vec<usize>>,
    pub sdp_solves: Option<usize>,
    pub wall_time: Option<f64>,
    pub trace_margin: Option<f64>,
    pub sample_margin: Option<f64>,
    pub verified: Option<bool>,
}

/// Gathers every stage output in the output directory into one table.
pub fn report(cfg: &ExperimentConfig) -> Result<(Vec<ReportRow>, String), ExperimentError> {
    let dir = &cfg.out_dir;
    let entries = std::fs::read_dir(dir).map_err(|_| ExperimentError::Missing(dir.display().to_string()))?;
    if entries.count() == 0 {
        return Err(ExperimentError::Missing(format!("stage outputs in {}", dir.display())));
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for kind in CertificateKind::ALL {
        let mut row = ReportRow {
            program: kind.program().to_string(),
            status: "not run".into(),
            decision_variables: None,
            gram_variables: None,
            scalar_constraints: None,
            sos_constraints: None,
            matrix_constraints: None,
            sdp_solves: None,
            wall_time: None,
            trace_margin: None,
            sample_margin: None,
            verified: None,
        };
        let cp = cfg.paths().certificate(kind);
        if cp.exists() {
            let file: CertificateFile = read_json(&cp)?;
            if file.config_hash != hash {
                row.status = "stale".into();
            } else {
                row.wall_time = Some(file.wall_time);
                row.status = if file.feasible { "feasible".into() } else { "infeasible".into() };
                if let Some(c) = &file.certificate {
                    let s = &c.stats;
                    row.decision_variables = Some(s.decision_variables);
                    row.gram_variables = Some(s.gram_variables);
                    row.scalar_constraints = Some(s.scalar_constraints);
                    row.sos_constraints = Some(s.sos_constraints);
                    row.matrix_constraints = Some(s.matrix_constraints.clone());
                    row.sdp_solves = Some(s.sdp_solves);
                }
            }
        }
        let vp = cfg.paths().verification(kind);
        if vp.exists() && row.status == "feasible" {
            let v: VerificationFile = read_json(&vp)?;
            if v.config_hash == hash {
                row.trace_margin = Some(v.trace.min_margin);
                row.sample_margin = Some(v.samples.worst_margin.min(v.samples.worst_adversarial));
                row.verified = Some(v.pass);
            }
        }
        rows.push(row);
    }
    let text = render_report(cfg, &rows)?;
    std::fs::write(cfg.paths().report(), &text).map_err(io_err(&cfg.paths().report()))?;
    Ok((rows, text))
}

fn render_report(cfg: &ExperimentConfig, rows: &[ReportRow]) -> Result<String, ExperimentError> {
    fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
        v.as_ref().map_or_else(|| "-".to_string(), |v| v.to_string())
    }
    fn sci(v: &Option<f64>) -> String {
        v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"))
    }
    let mut out = String::new();
    let _ = writeln!(out, "# Experiment report\n\nconfig hash: `{}`  seed: {}\n", cfg.hash(), cfg.seed);
    let mp = cfg.paths().model();
    if mp.exists() {
        let m: ModelFile = read_json(&mp)?;
        if m.config_hash == cfg.hash() {
            let _ = writeln!(
                out,
                "model: {} samples, full row rank {}, log det {:.4}, solve {:.2} s, true system member {}\n",
                m.rank.samples,
                m.rank.full_row_rank,
                m.model.log_det,
                m.solve_time,
                m.membership.as_ref().map_or("-".to_string(), |r| r.member.to_string())
            );
        }
    }
    let _ = writeln!(
        out,
        "| program | status | decision vars | Gram vars | scalar constraints | SOS constraints | matrix SOS sizes | SDPs | wall time (s) | trace margin | sample margin | verified |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|---|---|");
    for r in rows {
        let sizes = r.matrix_constraints.as_ref().map(|v| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            }
        });
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.program,
            r.status,
            opt(&r.decision_variables),
            opt(&r.gram_variables),
            opt(&r.scalar_constraints),
            opt(&r.sos_constraints),
            opt(&sizes),
            opt(&r.sdp_solves),
            r.wall_time.map_or("-".to_string(), |t| format!("{t:.2}")),
            sci(&r.trace_margin),
            sci(&r.sample_margin),
            opt(&r.verified)
        );
    }
    Ok(out)
}
