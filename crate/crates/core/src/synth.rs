//! Certificate synthesis for the GAS and ISS programs.
//!
//! The biconvex programs (GAS, ISS for actuator and for process
//! disturbances) are solved by alternation: step A fixes the controller and
//! searches for `V`, `λ` and the comparison functions; step B fixes `V`, `λ`
//! and searches for the controller, `α₃` and `α₄`. The convex programs
//! parametrize `V = Ẑᵀ P⁻¹ Ẑ` and `k = Y P⁻¹ Ẑ` and are solved in one shot.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{sym_pow, EllipsoidModel};
use crate::data::TrueSystem;
use crate::poly::{jacobian, monomials_up_to, FunctionLibrary, Monomial, PolyError, PolyMatrix, Polynomial};
use crate::sdp::{self, LinExpr, ScalarId, SdpProblem, SdpSolution, SolverConfig, VarRef};
use crate::sos::{
    self, AffinePoly, AffinePolyMatrix, CompiledSos, SosCertificate, SosConstraint, SosError, SosReport, TargetInstance,
};
use crate::verify::{check_pd_ru, PdCheck, VerifyError};

#[derive(Debug, Error)]
#[error("{program} is infeasible at {stage} ({status}); {guidance}")]
pub struct Infeasibility {
    pub program: String,
    pub stage: String,
    pub status: String,
    pub guidance: String,
    /// Per-constraint dual weights, largest first.
    pub diagnostics: Vec<(String, f64)>,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Infeasible(Box<Infeasibility>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("certificate rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Verify(#[from] Box<VerifyError>),
}

/// `α(r) = Σ_{k=1}^{N} c_k r^{2k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKInfty {
    pub coeffs: Vec<f64>,
}

impl ClassKInfty {
    pub fn new(coeffs: Vec<f64>) -> Self {
        ClassKInfty { coeffs }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r2 = r * r;
        let mut p = r2;
        let mut acc = 0.0;
        for c in &self.coeffs {
            acc += c * p;
            p *= r2;
        }
        acc
    }

    /// `α(|v|)` over `nvars` variables, `v` being the variables in `vars`.
    pub fn poly(&self, nvars: usize, vars: Range<usize>) -> Polynomial {
        let s = Polynomial::squared_norm(nvars, vars);
        let mut out = Polynomial::zero(nvars);
        let mut p = s.clone();
        for &c in &self.coeffs {
            out = &out + &p.scale(c);
            p = &p * &s;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    /// Nonnegative coefficients with sum at least `mu` (and positive),
    /// `α(0) = 0`, and strict increase on 100 sampled pairs in `[0, 10]`.
    pub fn satisfies_lemma(&self, mu: f64) -> bool {
        if self.coeffs.iter().any(|c| !(*c >= 0.0)) || !(self.sum() > 0.0) || self.sum() < mu * (1.0 - 1e-6) {
            return false;
        }
        if self.eval(0.0) != 0.0 {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..100).all(|_| {
            let a: f64 = rng.random_range(0.0..10.0);
            let b: f64 = rng.random_range(0.0..10.0);
            let (r1, r2) = if a < b { (a, b) } else { (b, a) };
            r1 == r2 || self.eval(r2) > self.eval(r1)
        })
    }

    pub fn format(&self, precision: usize) -> String {
        let mut parts = Vec::new();
        for (k, c) in self.coeffs.iter().enumerate() {
            if *c != 0.0 {
                parts.push(format!("{c:.precision$}r^{}", 2 * (k + 1)));
            }
        }
        if parts.is_empty() {
            "0".into()
        } else {
            parts.join(" + ")
        }
    }
}

/// `Γ(r) = Σ_{k=0}^{N} C_k r^{2k}` with symmetric PSD `C_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixClassK {
    #[serde(with = "crate::serde_mat::vec")]
    pub coeffs: Vec<DMatrix<f64>>,
}

impl MatrixClassK {
    pub fn dim(&self) -> usize {
        self.coeffs.first().map_or(0, |c| c.nrows())
    }

    pub fn eval(&self, r: f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut p = 1.0;
        for c in &self.coeffs {
            out += c * p;
            p *= r * r;
        }
        out
    }

    /// `α₄(r) = Σ_{k=1}^{N+1} λ_max(C_{k−1}) r^{2k}`, so `vᵀΓ(|v|)v ≤ α₄(|v|)`.
    pub fn alpha(&self) -> ClassKInfty {
        ClassKInfty::new(
            self.coeffs
                .iter()
                .map(|c| SymmetricEigen::new((c + c.transpose()) * 0.5).eigenvalues.max().max(0.0))
                .collect(),
        )
    }

    /// Every `C_k` PSD and `Σ C_k ⪰ ε I` up to relative `1e-7`.
    pub fn satisfies_constraints(&self, eps: f64) -> bool {
        let d = self.dim();
        let mut sum = DMatrix::zeros(d, d);
        for c in &self.coeffs {
            if sdp::normalized_min_eig(c) < -1e-7 {
                return false;
            }
            sum += c;
        }
        SymmetricEigen::new((&sum + sum.transpose()) * 0.5).eigenvalues.min() >= eps * (1.0 - 1e-6)
    }

    fn poly_matrix(&self, nvars: usize, vars: Range<usize>) -> PolyMatrix {
        let d = self.dim();
        let s = Polynomial::squared_norm(nvars, vars);
        let mut out = PolyMatrix::zeros(d, d, nvars);
        let mut p = Polynomial::constant(nvars, 1.0);
        for c in &self.coeffs {
            for i in 0..d {
                for j in 0..d {
                    let e = out.get(i, j) + &p.scale(c[(i, j)]);
                    out.set(i, j, e);
                }
            }
            p = &p * &s;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeRange {
    pub min: u32,
    pub max: u32,
}

impl DegreeRange {
    pub const fn new(min: u32, max: u32) -> Self {
        DegreeRange { min, max }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundObjective {
    /// Minimize the coefficient sum of `α₄` plus the Gram-trace term.
    Gain,
    /// Minimize `regularization · Σ trace(Gram)`.
    GramTrace,
    /// Pure feasibility.
    Feasibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlternationConfig {
    pub max_rounds: usize,
    pub objective: RoundObjective,
    pub regularization: f64,
}

impl Default for AlternationConfig {
    fn default() -> Self {
        AlternationConfig { max_rounds: 3, objective: RoundObjective::GramTrace, regularization: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub v_degree: DegreeRange,
    pub k_degree: DegreeRange,
    pub lambda_degree: DegreeRange,
    /// Restrict `λ` to the state variables.
    pub lambda_state_only: bool,
    pub y_max_degree: u32,
    /// Defaults to `deg Ξ + 2`.
    pub theta_max_degree: Option<u32>,
    /// Margin in the comparison-function constraints (biconvex path).
    pub mu: f64,
    /// Margin `ε` of the convex path.
    pub epsilon: f64,
    pub eta_min: f64,
    /// `P ⪰ p_margin · I`.
    pub p_margin: f64,
    /// `N₁..N₄`.
    pub alpha_terms: [usize; 4],
    /// Number of matrices `C₀..C_N` in `Γ`.
    pub gamma_terms: usize,
    /// Constrain every `C_k` to a multiple of the identity.
    pub gamma_scalar: bool,
    pub xi: Option<PolyMatrix>,
    pub initial_guess_k: Vec<Polynomial>,
    pub alternation: AlternationConfig,
    /// Relative back-off applied to optimal comparison functions before
    /// certifying them.
    pub extraction_backoff: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            v_degree: DegreeRange::new(2, 4),
            k_degree: DegreeRange::new(1, 3),
            lambda_degree: DegreeRange::new(0, 4),
            lambda_state_only: false,
            y_max_degree: 2,
            theta_max_degree: None,
            mu: 1e-3,
            epsilon: 1e-3,
            eta_min: 1e-3,
            p_margin: 1e-3,
            alpha_terms: [2, 2, 2, 2],
            gamma_terms: 2,
            gamma_scalar: false,
            xi: None,
            initial_guess_k: Vec::new(),
            alternation: AlternationConfig::default(),
            extraction_backoff: 1e-3,
        }
    }
}

impl SynthConfig {
    /// Defaults for one program on a library with state dimension `n`.
    pub fn for_kind(kind: CertificateKind, lib: &FunctionLibrary) -> Self {
        let mut cfg = SynthConfig::default();
        if kind.is_convex() {
            cfg.lambda_state_only = true;
            cfg.alternation.objective = RoundObjective::Feasibility;
            if let Some(zhat) = &lib.zhat {
                cfg.xi = Some(outer_product(zhat, lib.nvars));
            }
        }
        if kind == CertificateKind::IssProcessConvex {
            cfg.gamma_scalar = true;
            cfg.gamma_terms = 1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.v_degree.min < 2 || self.v_degree.max < self.v_degree.min {
            return Err(SynthError::Config("V degrees need 2 <= min <= max".into()));
        }
        if self.k_degree.min < 1 || self.k_degree.max < self.k_degree.min {
            return Err(SynthError::Config("controller degrees need 1 <= min <= max (k(0) = 0)".into()));
        }
        if self.lambda_degree.max < self.lambda_degree.min {
            return Err(SynthError::Config("lambda degrees need min <= max".into()));
        }
        for (name, v) in [("mu", self.mu), ("epsilon", self.epsilon), ("eta_min", self.eta_min), ("p_margin", self.p_margin)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be positive")));
            }
        }
        if self.alpha_terms.contains(&0) || self.gamma_terms == 0 {
            return Err(SynthError::Config("comparison functions need at least one term".into()));
        }
        if self.alternation.max_rounds == 0 {
            return Err(SynthError::Config("alternation needs at least one round".into()));
        }
        Ok(())
    }
}

/// `Ẑ Ẑᵀ`, the default `Ξ`.
pub fn outer_product(zhat: &[Polynomial], nvars: usize) -> PolyMatrix {
    let d = zhat.len();
    let mut out = PolyMatrix::zeros(d, d, nvars);
    for i in 0..d {
        for j in 0..d {
            out.set(i, j, &zhat[i] * &zhat[j]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Gas,
    IssActuatorBiconvex,
    IssProcessBiconvex,
    IssActuatorConvex,
    IssProcessConvex,
    ModelBased,
}

/// Where the exogenous input enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    None,
    /// `B W(x) (u + w)`, `w ∈ ℝᵐ`.
    Actuator,
    /// Additive `d ∈ ℝⁿ`.
    Process,
}

impl Channel {
    pub fn dim(self, n: usize, m: usize) -> usize {
        match self {
            Channel::None => 0,
            Channel::Actuator => m,
            Channel::Process => n,
        }
    }
}

impl CertificateKind {
    pub const ALL: [CertificateKind; 6] = [
        CertificateKind::Gas,
        CertificateKind::IssActuatorBiconvex,
        CertificateKind::IssProcessBiconvex,
        CertificateKind::IssActuatorConvex,
        CertificateKind::IssProcessConvex,
        CertificateKind::ModelBased,
    ];

    pub fn channel(self) -> Channel {
        match self {
            CertificateKind::Gas => Channel::None,
            CertificateKind::IssActuatorBiconvex | CertificateKind::IssActuatorConvex | CertificateKind::ModelBased => {
                Channel::Actuator
            }
            CertificateKind::IssProcessBiconvex | CertificateKind::IssProcessConvex => Channel::Process,
        }
    }

    pub fn is_convex(self) -> bool {
        matches!(self, CertificateKind::IssActuatorConvex | CertificateKind::IssProcessConvex | CertificateKind::ModelBased)
    }

    /// Command-line program name.
    pub fn program(self) -> &'static str {
        match self {
            CertificateKind::Gas => "gas",
            CertificateKind::IssActuatorBiconvex => "iss-w-biconvex",
            CertificateKind::IssProcessBiconvex => "iss-d-biconvex",
            CertificateKind::IssActuatorConvex => "iss-w-convex",
            CertificateKind::IssProcessConvex => "iss-d-convex",
            CertificateKind::ModelBased => "model-based",
        }
    }

    pub fn from_program(name: &str) -> Option<Self> {
        CertificateKind::ALL.into_iter().find(|k| k.program() == name)
    }
}

/// One SOS constraint of a certificate with its independent check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosRecord {
    pub name: String,
    pub target: TargetInstance,
    pub certificate: SosCertificate,
    pub report: SosReport,
}

impl SosRecord {
    fn new(name: &str, target: TargetInstance, gram: &SosCertificate) -> Self {
        let mut certificate = gram.clone();
        certificate.residual = sos::gram_residual(&target.scalarized(), &certificate);
        let report = sos::verify_certificate(&target, &certificate);
        SosRecord { name: name.to_string(), target, certificate, report }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub step: String,
    pub status: String,
    pub verified: bool,
    pub solve_time: f64,
    pub variables: usize,
    pub note: String,
}

/// Size and cost of a program, in the layout of a complexity table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramStats {
    /// Scalars and non-Gram matrix entries.
    pub decision_variables: usize,
    pub gram_variables: usize,
    /// Coefficient-level constraints outside SOS blocks.
    pub scalar_constraints: usize,
    pub sos_constraints: usize,
    /// Sizes of matrix SOS constraints.
    pub matrix_constraints: Vec<usize>,
    pub sdp_solves: usize,
    pub solve_time: f64,
}

impl ProgramStats {
    fn absorb(&mut self, problem: &SdpProblem, compiled: &[CompiledSos], scalar_constraints: usize, time: f64) {
        let mut decision = problem.num_scalars();
        let mut gram = 0;
        for b in 0..problem.num_blocks() {
            let id = sdp::BlockId(b);
            let d = problem.block_dim(id);
            if problem.block_name(id).starts_with("gram:") {
                gram += d * (d + 1) / 2;
            } else {
                decision += d * (d + 1) / 2;
            }
        }
        if self.sdp_solves == 0 {
            self.decision_variables = decision;
            self.gram_variables = gram;
            self.scalar_constraints = scalar_constraints;
            self.sos_constraints = compiled.iter().filter(|c| c.matrix_dim.is_none()).count();
            self.matrix_constraints = compiled.iter().filter_map(|c| c.matrix_dim).collect();
        }
        self.sdp_solves += 1;
        self.solve_time += time;
    }
}

/// Convex-path quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexParts {
    #[serde(with = "crate::serde_mat")]
    pub p: DMatrix<f64>,
    pub y: PolyMatrix,
    pub theta: PolyMatrix,
    pub gamma: MatrixClassK,
    pub eta: f64,
    pub zhat: Vec<Polynomial>,
    pub xi: PolyMatrix,
    /// `Ẑᵀ P⁻¹ Θ P⁻¹ Ẑ`
    pub a: Polynomial,
    /// `Ẑᵀ P⁻¹ Ξ P⁻¹ Ẑ`
    pub b: Polynomial,
    pub pd_check: PdCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Controller, one polynomial per input, in the state variables.
    pub k: Vec<Polynomial>,
    pub v: Polynomial,
    /// `α₁..α₄`; `α₄` is absent for GAS certificates.
    pub alphas: Vec<ClassKInfty>,
    /// Multiplier over `(x, exogenous input)`.
    pub lambda: Option<Polynomial>,
    pub convex: Option<ConvexParts>,
    pub sos: Vec<SosRecord>,
    pub rounds: Vec<RoundReport>,
    pub stats: ProgramStats,
    pub config: SynthConfig,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub model_hash: String,
    #[serde(default)]
    pub dataset_hash: String,
}

impl Certificate {
    pub fn exo_dim(&self) -> usize {
        self.kind.channel().dim(self.n, self.m)
    }

    pub fn alpha(&self, i: usize) -> Option<&ClassKInfty> {
        self.alphas.get(i - 1)
    }

    /// Re-expands every stored Gram certificate against its stored target.
    pub fn reverify(&self) -> Vec<(String, SosReport)> {
        self.sos.iter().map(|r| (r.name.clone(), sos::verify_certificate(&r.target, &r.certificate))).collect()
    }

    /// Invariants of a returned certificate: `V(0) = 0`, `k(0) = 0`, every
    /// SOS record passes, and every `αᵢ` satisfies the class-K∞ lemma.
    pub fn check_invariants(&self) -> Result<(), String> {
        let zero = Monomial::one(self.n);
        if self.v.coeff(&zero) != 0.0 {
            return Err("V(0) != 0".into());
        }
        if self.k.iter().any(|k| k.coeff(&zero) != 0.0) {
            return Err("k(0) != 0".into());
        }
        for (name, r) in self.reverify() {
            if !r.pass {
                return Err(format!("SOS constraint {name} fails: residual {:.3e}, min eig {:.3e}", r.residual, r.min_eig));
            }
        }
        let mu = if self.kind.is_convex() { 0.0 } else { self.config.mu };
        for (i, a) in self.alphas.iter().enumerate() {
            if !a.satisfies_lemma(mu) {
                return Err(format!("alpha{} violates the class-K-infinity conditions", i + 1));
            }
        }
        Ok(())
    }

    pub fn controller(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.k.len(), self.k.iter().map(|p| p.eval(x).expect("controller arity")))
    }

    /// `−α₃(|x|) + α₄(|e|)`.
    pub fn bound(&self, x: &[f64], exo: &[f64]) -> f64 {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ne = exo.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a3 = self.alphas.get(2).map_or(0.0, |a| a.eval(nx));
        let a4 = self.alphas.get(3).map_or(0.0, |a| a.eval(ne));
        -a3 + a4
    }

    /// `⟨∇V(x), f⟩` for the model `[A B] = ab` in closed loop.
    pub fn vdot(&self, lib: &FunctionLibrary, ab: &DMatrix<f64>, x: &[f64], exo: &[f64]) -> Result<f64, PolyError> {
        let f = self.closed_loop_rhs(lib, ab, x, exo)?;
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.v.derivative(i).eval(x)? * f[i];
        }
        Ok(acc)
    }

    /// Closed-loop vector field for the model `[A B] = ab`.
    pub fn closed_loop_rhs(
        &self,
        lib: &FunctionLibrary,
        ab: &DMatrix<f64>,
        x: &[f64],
        exo: &[f64],
    ) -> Result<DVector<f64>, PolyError> {
        let mut u = self.controller(x);
        if self.kind.channel() == Channel::Actuator {
            for (j, e) in exo.iter().enumerate() {
                u[j] += e;
            }
        }
        let reg = lib.regressor(x, u.as_slice())?;
        let mut f = ab * reg;
        if self.kind.channel() == Channel::Process {
            for (j, e) in exo.iter().enumerate() {
                f[j] += e;
            }
        }
        Ok(f)
    }

    /// Human-readable layout of the solution, one quantity per line.
    pub fn summary(&self) -> String {
        let xs: Vec<String> = (1..=self.n).map(|i| format!("x{i}")).collect();
        let mut out = format!("program: {}\n", self.kind.program());
        for (j, k) in self.k.iter().enumerate() {
            out.push_str(&format!("k{}(x) = {}\n", j + 1, k.format_with(&xs, 4)));
        }
        out.push_str(&format!("V(x) = {}\n", self.v.format_with(&xs, 4)));
        for (i, a) in self.alphas.iter().enumerate() {
            out.push_str(&format!("alpha{}(r) = {}\n", i + 1, a.format(4)));
        }
        if let Some(l) = &self.lambda {
            let mut names = xs.clone();
            let e = l.nvars() - self.n;
            let prefix = if self.kind.channel() == Channel::Process { "d" } else { "w" };
            names.extend((1..=e).map(|i| if e == 1 { prefix.to_string() } else { format!("{prefix}{i}") }));
            out.push_str(&format!("lambda = {}\n", l.format_with(&names, 4)));
        }
        if let Some(c) = &self.convex {
            out.push_str(&format!("P = {:?}\n", crate::serde_mat::to_rows(&c.p)));
            out.push_str(&format!("eta = {:.4}\n", c.eta));
            out.push_str(&format!("a(x) = {}\n", c.a.format_with(&xs, 4)));
            out.push_str(&format!("b(x) = {}\n", c.b.format_with(&xs, 4)));
        }
        out
    }
}

/// Factor that is either fixed data or affine in the decision variables.
#[derive(Clone, Debug)]
enum Mixed {
    Fixed(Polynomial),
    Free(AffinePoly),
}

impl Mixed {
    fn zero(nv: usize) -> Mixed {
        Mixed::Fixed(Polynomial::zero(nv))
    }

    fn affine(&self) -> AffinePoly {
        match self {
            Mixed::Fixed(p) => AffinePoly::from_poly(p),
            Mixed::Free(a) => a.clone(),
        }
    }

    fn add(&self, o: &Mixed) -> Mixed {
        match (self, o) {
            (Mixed::Fixed(a), Mixed::Fixed(b)) => Mixed::Fixed(a + b),
            _ => Mixed::Free(self.affine().plus(&o.affine())),
        }
    }

    fn scale(&self, s: f64) -> Mixed {
        match self {
            Mixed::Fixed(p) => Mixed::Fixed(p.scale(s)),
            Mixed::Free(a) => Mixed::Free(a.scale(s)),
        }
    }

    fn mul_poly(&self, p: &Polynomial) -> Mixed {
        match self {
            Mixed::Fixed(a) => Mixed::Fixed(a * p),
            Mixed::Free(a) => Mixed::Free(a.mul_poly(p)),
        }
    }

    /// Product; at most one factor may carry unknowns.
    fn mul(&self, o: &Mixed) -> Mixed {
        match (self, o) {
            (Mixed::Fixed(a), _) => o.mul_poly(a),
            (_, Mixed::Fixed(b)) => self.mul_poly(b),
            _ => panic!("bilinear product of decision polynomials"),
        }
    }

    fn derivative(&self, i: usize) -> Mixed {
        match self {
            Mixed::Fixed(p) => Mixed::Fixed(p.derivative(i)),
            Mixed::Free(a) => Mixed::Free(a.derivative(i)),
        }
    }
}

/// Model data entering the dissipation constraint.
struct Setup {
    kind: CertificateKind,
    n: usize,
    m: usize,
    e: usize,
    /// `n + e`
    nv: usize,
    /// `ζ̄` (or the true `[A B]ᵀ`), `(N+M) × n`.
    zeta: DMatrix<f64>,
    q: DMatrix<f64>,
    q_half: DMatrix<f64>,
    abar: DMatrix<f64>,
    a_inv_half: DMatrix<f64>,
    /// `Z` lifted to `nv` variables.
    z: Vec<Polynomial>,
    /// `W` lifted to `nv` variables.
    w: PolyMatrix,
}

impl Setup {
    fn new(kind: CertificateKind, zeta: DMatrix<f64>, q: DMatrix<f64>, abar: DMatrix<f64>, lib: &FunctionLibrary) -> Result<Self, SynthError> {
        lib.validate()?;
        let n = lib.nvars;
        let m = lib.n_inputs();
        let e = kind.channel().dim(n, m);
        let nv = n + e;
        let k = lib.n_z() + lib.n_w();
        if zeta.shape() != (k, n) {
            return Err(SynthError::Config(format!(
                "model is {}x{} but the library needs {}x{}",
                zeta.nrows(),
                zeta.ncols(),
                k,
                n
            )));
        }
        let z = lib.z.iter().map(|p| p.extend_vars(nv)).collect();
        let mut w = PolyMatrix::zeros(lib.w.rows(), m, nv);
        for i in 0..lib.w.rows() {
            for j in 0..m {
                w.set(i, j, lib.w.get(i, j).extend_vars(nv));
            }
        }
        Ok(Setup {
            kind,
            n,
            m,
            e,
            nv,
            q_half: sym_pow(&q, 0.5),
            a_inv_half: sym_pow(&abar, -0.5),
            zeta,
            q,
            abar,
            z,
            w,
        })
    }

    fn from_model(kind: CertificateKind, model: &EllipsoidModel, lib: &FunctionLibrary) -> Result<Self, SynthError> {
        model.validate().map_err(|e| SynthError::Config(e.to_string()))?;
        Setup::new(kind, model.zeta_bar.clone(), model.qbar.clone(), model.abar.clone(), lib)
    }

    fn k_dim(&self) -> usize {
        self.zeta.nrows()
    }

    fn exo_var(&self, j: usize) -> Polynomial {
        Polynomial::var(self.nv, self.n + j)
    }

    fn lift(&self, p: &Polynomial) -> Polynomial {
        p.extend_vars(self.nv)
    }

    fn lift_affine(&self, p: &AffinePoly) -> AffinePoly {
        let map: Vec<usize> = (0..p.nvars()).collect();
        p.remap(self.nv, &map)
    }

    /// Largest multiplier degree the dissipation constraint can represent.
    /// The blocks `λ Ā^{-1/2} g` must be reached by products of the first
    /// row's Gram basis (half the degree of `M₁₁`) with the basis of the
    /// `2λ` rows (half the degree of `λ`); any higher-degree part of `λ` is
    /// forced to zero by coefficient matching.
    fn lambda_degree_cap(&self, cfg: &SynthConfig, k: &[Polynomial]) -> u32 {
        let deg_z = self.z.iter().map(Polynomial::degree).max().unwrap_or(0);
        let deg_w = self.w.degree();
        let deg_k = k.iter().map(Polynomial::degree).max().unwrap_or(0).max(cfg.k_degree.max);
        let mut deg_g = deg_z.max(deg_w + deg_k);
        if self.kind.channel() == Channel::Actuator {
            deg_g = deg_g.max(deg_w + 1);
        }
        let deg_f = if self.kind.channel() == Channel::Process { deg_g.max(1) } else { deg_g };
        let mut deg_m11 = (cfg.v_degree.max.saturating_sub(1) + deg_f).max(2 * cfg.alpha_terms[2] as u32);
        if self.e > 0 {
            deg_m11 = deg_m11.max(2 * cfg.alpha_terms[3] as u32);
        }
        let half = deg_m11 / 2;
        (0..=cfg.lambda_degree.max).rev().find(|d| d + deg_g <= half + d / 2).unwrap_or(0)
    }

    /// `[Z; W(k + w)]` (actuator) or `[Z; W k]`.
    fn regressor(&self, k: &[Mixed]) -> Vec<Mixed> {
        let mut g: Vec<Mixed> = self.z.iter().cloned().map(Mixed::Fixed).collect();
        let mut u: Vec<Mixed> = k.to_vec();
        if self.kind.channel() == Channel::Actuator {
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = uj.add(&Mixed::Fixed(self.exo_var(j)));
            }
        }
        for i in 0..self.w.rows() {
            let mut acc = Mixed::zero(self.nv);
            for (j, uj) in u.iter().enumerate() {
                let wij = self.w.get(i, j);
                if !wij.is_zero() {
                    acc = acc.add(&uj.mul_poly(wij));
                }
            }
            g.push(acc);
        }
        g
    }

    /// `−M` for the block matrix `M` of the GAS/ISS dissipation constraint:
    /// `[[α₃ − α₄ + ∇V ζ̄ᵀ g (+ ∇V d), ⋆, ⋆], [Q̄^{1/2} ∇Vᵀ, −2λI, ⋆], [λ Ā^{-1/2} g, 0, −2λI]]`.
    fn biconvex_matrix(&self, v: &Mixed, lambda: &Mixed, k: &[Mixed], a3: &Mixed, a4: &Mixed) -> AffinePolyMatrix {
        let (n, nv, kd) = (self.n, self.nv, self.k_dim());
        let g = self.regressor(k);
        let grad: Vec<Mixed> = (0..n).map(|i| v.derivative(i)).collect();
        let mut m11 = a3.add(&a4.scale(-1.0));
        for (j, gj) in grad.iter().enumerate() {
            let mut fj = Mixed::zero(nv);
            for (i, gi) in g.iter().enumerate() {
                let c = self.zeta[(i, j)];
                if c != 0.0 {
                    fj = fj.add(&gi.scale(c));
                }
            }
            if self.kind.channel() == Channel::Process {
                fj = fj.add(&Mixed::Fixed(self.exo_var(j)));
            }
            m11 = m11.add(&gj.mul(&fj));
        }
        let size = 1 + n + kd;
        let mut s = AffinePolyMatrix::zeros(size, size, nv);
        s.set(0, 0, m11.affine().scale(-1.0));
        let two_l = lambda.affine().scale(2.0);
        for i in 0..n {
            let mut e = Mixed::zero(nv);
            for (j, gj) in grad.iter().enumerate() {
                let c = self.q_half[(i, j)];
                if c != 0.0 {
                    e = e.add(&gj.scale(c));
                }
            }
            let a = e.affine().scale(-1.0);
            s.set(1 + i, 0, a.clone());
            s.set(0, 1 + i, a);
            s.set(1 + i, 1 + i, two_l.clone());
        }
        for i in 0..kd {
            let mut e = Mixed::zero(nv);
            for (l, gl) in g.iter().enumerate() {
                let c = self.a_inv_half[(i, l)];
                if c != 0.0 {
                    e = e.add(&gl.scale(c));
                }
            }
            let a = lambda.mul(&e).affine().scale(-1.0);
            s.set(1 + n + i, 0, a.clone());
            s.set(0, 1 + n + i, a);
            s.set(1 + n + i, 1 + n + i, two_l.clone());
        }
        s
    }
}

fn alpha_affine(ids: &[ScalarId], nv: usize, vars: Range<usize>) -> AffinePoly {
    let s = Polynomial::squared_norm(nv, vars);
    let mut out = AffinePoly::zero(nv);
    let mut p = s.clone();
    for id in ids {
        let e = LinExpr::var(VarRef::scalar(*id));
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &e.scaled(c));
        }
        p = &p * &s;
    }
    out
}

/// Nonnegative coefficients `c₁..c_N` with `Σ c ≥ mu`, imposed with a small
/// margin so that the rounded solution still meets `mu`.
fn alpha_decision(problem: &mut SdpProblem, name: &str, terms: usize, mu: f64) -> Vec<ScalarId> {
    problem.set_group(name);
    let ids: Vec<ScalarId> = (0..terms).map(|k| problem.add_scalar(&format!("{name}.c{}", k + 1), Some(0.0))).collect();
    let mut sum = LinExpr::constant(-mu * (1.0 + MARGIN));
    for id in &ids {
        sum.add_term(VarRef::scalar(*id), 1.0);
    }
    problem.add_nonnegative(&format!("{name}.sum"), &sum);
    ids
}

/// Solver round-off can leave sign-constrained coefficients slightly
/// negative; they are zeroed and the certificate re-verified with the
/// rounded values.
fn clamp_tiny(v: f64) -> f64 {
    if v < 0.0 && v > -1e-6 {
        0.0
    } else {
        v
    }
}

/// Drops coefficients at solver round-off level, e.g. those pinned to zero
/// by equality constraints.
fn rounded(p: Polynomial) -> Polynomial {
    let tol = ROUND_OFF * p.max_abs_coeff().max(1.0);
    p.prune(tol)
}

const ROUND_OFF: f64 = 1e-9;

/// Relative margin added to strict lower bounds inside the programs.
const MARGIN: f64 = 1e-3;

fn read_alpha(sol: &SdpSolution, ids: &[ScalarId]) -> ClassKInfty {
    ClassKInfty::new(ids.iter().map(|id| clamp_tiny(sol.scalar(*id))).collect())
}

fn objective_for(compiled: &[CompiledSos], cfg: &AlternationConfig, gain: &[ScalarId]) -> LinExpr {
    let mut obj = LinExpr::zero();
    if cfg.objective != RoundObjective::Feasibility {
        for c in compiled {
            obj.add_scaled(&c.gram_trace(), cfg.regularization);
        }
    }
    if cfg.objective == RoundObjective::Gain {
        for id in gain {
            obj.add_term(VarRef::scalar(*id), 1.0);
        }
    }
    obj
}

fn gram_of(c: &CompiledSos, sol: &SdpSolution) -> SosCertificate {
    let gram = match c.block {
        Some(b) => sol.block(b).clone(),
        None => DMatrix::zeros(0, 0),
    };
    SosCertificate { gram, basis: c.basis.clone(), residual: 0.0 }
}

fn infeasible(program: &str, stage: &str, sol: &SdpSolution, guidance: &str, rounds: &[RoundReport]) -> SynthError {
    let mut diagnostics = sol.group_duals.clone();
    diagnostics.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    SynthError::Infeasible(Box::new(Infeasibility {
        program: program.to_string(),
        stage: stage.to_string(),
        status: format!("{:?}/{}", sol.status, sol.solver_status),
        guidance: guidance.to_string(),
        diagnostics,
        rounds: rounds.to_vec(),
    }))
}

fn decision_monomials(nvars: usize, lift_to: usize, range: DegreeRange) -> Vec<Monomial> {
    let map: Vec<usize> = (0..nvars).collect();
    monomials_up_to(nvars, range.min, range.max).into_iter().map(|m| m.remap(lift_to, &map)).collect()
}

/// Fixed quantities of a GAS/ISS biconvex certificate.
#[derive(Clone, Debug)]
struct BiconvexParts {
    v: Polynomial,
    lambda: Polynomial,
    k: Vec<Polynomial>,
    alphas: Vec<ClassKInfty>,
}

impl BiconvexParts {
    fn targets(&self, st: &Setup, mu: f64) -> BTreeMap<String, TargetInstance> {
        let n = st.n;
        let mut t = BTreeMap::new();
        t.insert("v_lower".into(), TargetInstance::Scalar(&self.v - &self.alphas[0].poly(n, 0..n)));
        t.insert("v_upper".into(), TargetInstance::Scalar(&self.alphas[1].poly(n, 0..n) - &self.v));
        t.insert("lambda".into(), TargetInstance::Scalar(&self.lambda - &Polynomial::constant(st.nv, mu * (1.0 + MARGIN))));
        let a4 = match self.alphas.get(3) {
            Some(a) => Mixed::Fixed(a.poly(st.nv, n..st.nv)),
            None => Mixed::zero(st.nv),
        };
        let k: Vec<Mixed> = self.k.iter().map(|p| Mixed::Fixed(st.lift(p))).collect();
        let s = st.biconvex_matrix(
            &Mixed::Fixed(st.lift(&self.v)),
            &Mixed::Fixed(self.lambda.clone()),
            &k,
            &Mixed::Fixed(self.alphas[2].poly(st.nv, 0..n)),
            &a4,
        );
        t.insert("dissipation".into(), TargetInstance::Matrix(s.to_poly_matrix().expect("fixed data")));
        t
    }

    fn lemma_ok(&self, mu: f64) -> bool {
        self.alphas.iter().all(|a| a.satisfies_lemma(mu))
    }
}

fn records_for(targets: &BTreeMap<String, TargetInstance>, grams: &BTreeMap<String, SosCertificate>) -> Vec<SosRecord> {
    targets
        .iter()
        .map(|(name, t)| {
            let g = grams.get(name).cloned().unwrap_or(SosCertificate { gram: DMatrix::zeros(0, 0), basis: vec![], residual: 0.0 });
            SosRecord::new(name, t.clone(), &g)
        })
        .collect()
}

type StepOutcome = (BiconvexParts, BTreeMap<String, SosCertificate>, SdpSolution, usize);

enum StepError {
    Solver(Box<SdpSolution>),
    Build(SynthError),
}

fn step_a(
    st: &Setup,
    k: &[Polynomial],
    cfg: &SynthConfig,
    solver: &SolverConfig,
    stats: &mut ProgramStats,
) -> Result<StepOutcome, StepError> {
    let (n, nv) = (st.n, st.nv);
    let mut pr = SdpProblem::new();
    pr.set_group("V");
    let (v_aff, _) = AffinePoly::decision(&mut pr, "V", n, &decision_monomials(n, n, cfg.v_degree));
    let cap = st.lambda_degree_cap(cfg, k);
    let lrange = DegreeRange::new(cfg.lambda_degree.min.min(cap), cfg.lambda_degree.max.min(cap));
    let lmonos = if cfg.lambda_state_only {
        decision_monomials(n, nv, lrange)
    } else {
        decision_monomials(nv, nv, lrange)
    };
    pr.set_group("lambda");
    let (l_aff, _) = AffinePoly::decision(&mut pr, "lambda", nv, &lmonos);
    let a1 = alpha_decision(&mut pr, "alpha1", cfg.alpha_terms[0], cfg.mu);
    let a2 = alpha_decision(&mut pr, "alpha2", cfg.alpha_terms[1], cfg.mu);
    let a3 = alpha_decision(&mut pr, "alpha3", cfg.alpha_terms[2], cfg.mu);
    let a4 = if st.e > 0 { alpha_decision(&mut pr, "alpha4", cfg.alpha_terms[3], cfg.mu) } else { vec![] };
    let a4_poly = if st.e > 0 { Mixed::Free(alpha_affine(&a4, nv, n..nv)) } else { Mixed::zero(nv) };
    let k_fixed: Vec<Mixed> = k.iter().map(|p| Mixed::Fixed(st.lift(p))).collect();
    let s = st.biconvex_matrix(
        &Mixed::Free(st.lift_affine(&v_aff)),
        &Mixed::Free(l_aff.clone()),
        &k_fixed,
        &Mixed::Free(alpha_affine(&a3, nv, 0..n)),
        &a4_poly,
    );
    let constraints = [SosConstraint::scalar("v_lower", v_aff.minus(&alpha_affine(&a1, n, 0..n))),
        SosConstraint::scalar("v_upper", alpha_affine(&a2, n, 0..n).minus(&v_aff)),
        SosConstraint::scalar(
            "lambda",
            l_aff.minus(&AffinePoly::from_poly(&Polynomial::constant(nv, cfg.mu * (1.0 + MARGIN)))),
        ),
        SosConstraint::matrix("dissipation", s)];
    let compiled: Vec<CompiledSos> = constraints
        .iter()
        .map(|c| sos::compile(&mut pr, c))
        .collect::<Result<_, _>>()
        .map_err(|e| StepError::Build(e.into()))?;
    pr.set_objective(objective_for(&compiled, &cfg.alternation, &[]));
    let t0 = Instant::now();
    let sol = sdp::solve(&pr, solver).map_err(|e| StepError::Build(e.into()))?;
    stats.absorb(&pr, &compiled, 1 + 2 * (3 + usize::from(st.e > 0)), t0.elapsed().as_secs_f64());
    let vars = pr.num_variables();
    if !sol.status.is_feasible() {
        return Err(StepError::Solver(Box::new(sol)));
    }
    let mut alphas = vec![read_alpha(&sol, &a1), read_alpha(&sol, &a2), read_alpha(&sol, &a3)];
    if st.e > 0 {
        alphas.push(read_alpha(&sol, &a4));
    }
    let parts = BiconvexParts {
        v: rounded(v_aff.instantiate(&sol)),
        lambda: rounded(l_aff.instantiate(&sol)),
        k: k.to_vec(),
        alphas,
    };
    let grams = compiled.iter().map(|c| (c.name.clone(), gram_of(c, &sol))).collect();
    Ok((parts, grams, sol, vars))
}

fn step_b(
    st: &Setup,
    prev: &BiconvexParts,
    basis: Option<Vec<Monomial>>,
    cfg: &SynthConfig,
    solver: &SolverConfig,
    stats: &mut ProgramStats,
) -> Result<StepOutcome, StepError> {
    let (n, nv) = (st.n, st.nv);
    let mut pr = SdpProblem::new();
    pr.set_group("k");
    let kmonos = decision_monomials(n, n, cfg.k_degree);
    let k_aff: Vec<AffinePoly> =
        (0..st.m).map(|j| AffinePoly::decision(&mut pr, &format!("k{}", j + 1), n, &kmonos).0).collect();
    let a3 = alpha_decision(&mut pr, "alpha3", cfg.alpha_terms[2], cfg.mu);
    let a4 = if st.e > 0 { alpha_decision(&mut pr, "alpha4", cfg.alpha_terms[3], cfg.mu) } else { vec![] };
    let a4_poly = if st.e > 0 { Mixed::Free(alpha_affine(&a4, nv, n..nv)) } else { Mixed::zero(nv) };
    let k_free: Vec<Mixed> = k_aff.iter().map(|a| Mixed::Free(st.lift_affine(a))).collect();
    let s = st.biconvex_matrix(
        &Mixed::Fixed(st.lift(&prev.v)),
        &Mixed::Fixed(prev.lambda.clone()),
        &k_free,
        &Mixed::Free(alpha_affine(&a3, nv, 0..n)),
        &a4_poly,
    );
    // Reuse the Gram basis of step A: the fixed multiplier may have lost
    // the high-degree support that basis was derived from.
    let mut constraint = SosConstraint::matrix("dissipation", s);
    constraint.basis = basis;
    let compiled = vec![sos::compile(&mut pr, &constraint).map_err(|e| StepError::Build(e.into()))?];
    pr.set_objective(objective_for(&compiled, &cfg.alternation, &a4));
    let t0 = Instant::now();
    let mut sol = sdp::solve(&pr, solver).map_err(|e| StepError::Build(e.into()))?;
    // Optimizing objectives push toward the boundary of the feasible set;
    // on failure, retry with weaker ones.
    for fallback in [RoundObjective::GramTrace, RoundObjective::Feasibility] {
        if sol.status.is_feasible() || fallback >= cfg.alternation.objective {
            continue;
        }
        let plain = AlternationConfig { objective: fallback, ..cfg.alternation.clone() };
        pr.set_objective(objective_for(&compiled, &plain, &[]));
        sol = sdp::solve(&pr, solver).map_err(|e| StepError::Build(e.into()))?;
    }
    stats.absorb(&pr, &compiled, 2 * (1 + usize::from(st.e > 0)), t0.elapsed().as_secs_f64());
    let vars = pr.num_variables();
    if !sol.status.is_feasible() {
        return Err(StepError::Solver(Box::new(sol)));
    }
    let mut alphas = vec![prev.alphas[0].clone(), prev.alphas[1].clone(), read_alpha(&sol, &a3)];
    if st.e > 0 {
        alphas.push(read_alpha(&sol, &a4));
    }
    let k = k_aff.iter().map(|a| rounded(a.instantiate(&sol))).collect();
    let parts = BiconvexParts { v: prev.v.clone(), lambda: prev.lambda.clone(), k, alphas };
    let grams = compiled.iter().map(|c| (c.name.clone(), gram_of(c, &sol))).collect();
    Ok((parts, grams, sol, vars))
}

fn check_initial_guess(k: &[Polynomial], n: usize, m: usize) -> Result<Vec<Polynomial>, SynthError> {
    if k.len() != m {
        return Err(SynthError::Config(format!("initial controller guess has {} entries, expected {m}", k.len())));
    }
    let k: Vec<Polynomial> = k.iter().map(|p| p.clone().conform(n)).collect::<Result<_, _>>()?;
    if k.iter().any(|p| p.coeff(&Monomial::one(n)) != 0.0) {
        return Err(SynthError::Config("initial controller guess must vanish at the origin".into()));
    }
    Ok(k)
}

fn synth_biconvex(
    kind: CertificateKind,
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    cfg.validate()?;
    let st = Setup::from_model(kind, model, lib)?;
    let program = kind.program();
    if cfg.initial_guess_k.is_empty() {
        return Err(SynthError::Config(format!("{program} needs an initial controller guess")));
    }
    let mut k = check_initial_guess(&cfg.initial_guess_k, st.n, st.m)?;
    let mut stats = ProgramStats::default();
    let mut rounds: Vec<RoundReport> = Vec::new();
    let mut accepted: Option<(BiconvexParts, BTreeMap<String, SosCertificate>)> = None;
    let mut failure: Option<SynthError> = None;

    'outer: for round in 1..=cfg.alternation.max_rounds {
        for step in ["A", "B"] {
            let outcome = if step == "A" {
                step_a(&st, &k, cfg, solver, &mut stats)
            } else {
                let (prev, grams) = accepted.as_ref().expect("step A accepted");
                let basis = grams.get("dissipation").map(|g| g.basis.clone());
                step_b(&st, prev, basis, cfg, solver, &mut stats)
            };
            match outcome {
                Ok((parts, new_grams, sol, vars)) => {
                    let mut grams = accepted.as_ref().map(|a| a.1.clone()).unwrap_or_default();
                    grams.extend(new_grams);
                    let records = records_for(&parts.targets(&st, cfg.mu), &grams);
                    let verified = records.iter().all(|r| r.report.pass) && parts.lemma_ok(cfg.mu);
                    let note = if verified {
                        String::new()
                    } else if records.iter().all(|r| r.report.pass) {
                        format!("comparison functions violate the class-K-infinity conditions: {:?}", parts.alphas)
                    } else {
                        records
                            .iter()
                            .filter(|r| !r.report.pass)
                            .map(|r| format!("{}: residual {:.2e}, min eig {:.2e}", r.name, r.report.residual, r.report.min_eig))
                            .collect::<Vec<_>>()
                            .join("; ")
                    };
                    rounds.push(RoundReport {
                        round,
                        step: step.into(),
                        status: format!("{:?}", sol.status),
                        verified,
                        solve_time: sol.solve_time,
                        variables: vars,
                        note,
                    });
                    if !verified {
                        log::warn!("{program}: round {round} step {step} failed re-verification; keeping previous assignment");
                        break 'outer;
                    }
                    k = parts.k.clone();
                    accepted = Some((parts, grams));
                }
                Err(StepError::Build(e)) => {
                    failure = Some(e);
                    break 'outer;
                }
                Err(StepError::Solver(sol)) => {
                    rounds.push(RoundReport {
                        round,
                        step: step.into(),
                        status: format!("{:?}", sol.status),
                        verified: false,
                        solve_time: sol.solve_time,
                        variables: 0,
                        note: sol.solver_status.clone(),
                    });
                    failure = Some(infeasible(
                        program,
                        &format!("round {round} step {step}"),
                        &sol,
                        "enlarge degrees, change the initial controller guess, or collect more informative data",
                        &rounds,
                    ));
                    break 'outer;
                }
            }
        }
    }

    let Some((parts, grams)) = accepted else {
        return Err(failure.unwrap_or_else(|| {
            let note = rounds.last().map(|r| r.note.clone()).unwrap_or_default();
            SynthError::Rejected(format!("{program}: no round passed re-verification ({note})"))
        }));
    };
    if let Some(f) = &failure {
        log::warn!("{program}: alternation stopped early: {f}");
    }
    let sos = records_for(&parts.targets(&st, cfg.mu), &grams);
    let cert = Certificate {
        kind,
        n: st.n,
        m: st.m,
        k: parts.k,
        v: parts.v,
        alphas: parts.alphas,
        lambda: Some(parts.lambda),
        convex: None,
        sos,
        rounds,
        stats,
        config: cfg.clone(),
        config_hash: String::new(),
        model_hash: String::new(),
        dataset_hash: model.dataset_hash.clone(),
    };
    cert.check_invariants().map_err(SynthError::Rejected)?;
    Ok(cert)
}

/// GAS program with the controller fixed in step B of each round.
pub fn synth_gas(
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    synth_biconvex(CertificateKind::Gas, model, lib, cfg, solver)
}

/// ISS with respect to an actuator disturbance `w`, by alternation.
pub fn synth_iss_actuator_biconvex(
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    synth_biconvex(CertificateKind::IssActuatorBiconvex, model, lib, cfg, solver)
}

/// ISS with respect to a process disturbance `d`, by alternation.
pub fn synth_iss_process_biconvex(
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    synth_biconvex(CertificateKind::IssProcessBiconvex, model, lib, cfg, solver)
}

/// Result of the 0-GAS re-verification of an ISS certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenReport {
    pub pass: bool,
    pub reports: Vec<(String, SosReport)>,
}

/// Keeps basis elements free of the variables in `drop` and removes those
/// variables, so that `B(x, 0)ᵀ G B(x, 0)` is certified by the retained block.
fn restrict_gram(cert: &SosCertificate, drop: Range<usize>) -> SosCertificate {
    let keep: Vec<usize> = (0..cert.basis.len())
        .filter(|&i| drop.clone().all(|v| cert.basis[i].exponents()[v] == 0))
        .collect();
    let total = cert.basis.first().map_or(0, |b| b.nvars());
    let width = drop.end - drop.start;
    let map: Vec<usize> = (0..total)
        .map(|v| if v < drop.start { v } else if v >= drop.end { v - width } else { 0 })
        .collect();
    let basis = keep.iter().map(|&i| cert.basis[i].remap(total - width, &map)).collect();
    let gram = DMatrix::from_fn(keep.len(), keep.len(), |a, b| cert.gram[(keep[a], keep[b])]);
    SosCertificate { gram, basis, residual: 0.0 }
}

/// Freezes the exogenous input of an ISS biconvex certificate to zero and
/// re-verifies the GAS constraint set for `(k, V, α₁..α₃, λ(·, 0))` with the
/// restricted Gram matrices.
pub fn frozen_gas_check(cert: &Certificate, model: &EllipsoidModel, lib: &FunctionLibrary) -> Result<FrozenReport, SynthError> {
    if !matches!(cert.kind, CertificateKind::IssActuatorBiconvex | CertificateKind::IssProcessBiconvex) {
        return Err(SynthError::Config("0-GAS check applies to biconvex ISS certificates".into()));
    }
    let n = cert.n;
    let e = cert.exo_dim();
    let lambda = cert.lambda.as_ref().ok_or_else(|| SynthError::Config("certificate has no multiplier".into()))?;
    let mut l0 = lambda.clone();
    for j in 0..e {
        l0 = l0.set_variable(n + j, 0.0);
    }
    let map: Vec<usize> = (0..n + e).map(|v| v.min(n.saturating_sub(1))).collect();
    let l0 = l0.remap(n, &map);
    let parts = BiconvexParts { v: cert.v.clone(), lambda: l0, k: cert.k.clone(), alphas: cert.alphas[..3].to_vec() };
    let st = Setup::from_model(CertificateKind::Gas, model, lib)?;
    let targets = parts.targets(&st, cert.config.mu);
    let mut grams = BTreeMap::new();
    for r in &cert.sos {
        let g = match r.name.as_str() {
            "lambda" => restrict_gram(&r.certificate, n..n + e),
            "dissipation" => restrict_gram(&r.certificate, n..n + e),
            _ => r.certificate.clone(),
        };
        grams.insert(r.name.clone(), g);
    }
    let records = records_for(&targets, &grams);
    let lemma = parts.lemma_ok(cert.config.mu);
    let pass = lemma && records.iter().all(|r| r.report.pass);
    Ok(FrozenReport { pass, reports: records.into_iter().map(|r| (r.name, r.report)).collect() })
}

/// Decision data of the convex programs, as affine entries.
struct ConvexVars {
    p: Vec<Vec<AffinePoly>>,
    y: Vec<Vec<AffinePoly>>,
    theta: AffinePolyMatrix,
    gamma: AffinePolyMatrix,
    lambda: Option<AffinePoly>,
}

struct ConvexSetup {
    st: Setup,
    zhat: Vec<Polynomial>,
    /// `∂Ẑ/∂x` over `nv` variables.
    jac: PolyMatrix,
    h: PolyMatrix,
    robust: bool,
}

impl ConvexSetup {
    fn new(st: Setup, lib: &FunctionLibrary, robust: bool) -> Result<Self, SynthError> {
        let (Some(zhat), Some(h)) = (lib.zhat.clone(), lib.h.clone()) else {
            return Err(SynthError::Config("convex programs need a factorization Z = H Zhat".into()));
        };
        let n = st.n;
        let j = jacobian(&zhat, n);
        let mut jac = PolyMatrix::zeros(j.rows(), n, st.nv);
        for a in 0..j.rows() {
            for c in 0..n {
                jac.set(a, c, st.lift(j.get(a, c)));
            }
        }
        let mut hl = PolyMatrix::zeros(h.rows(), h.cols(), st.nv);
        for a in 0..h.rows() {
            for c in 0..h.cols() {
                hl.set(a, c, st.lift(h.get(a, c)));
            }
        }
        Ok(ConvexSetup { st, zhat, jac, h: hl, robust })
    }

    fn nhat(&self) -> usize {
        self.zhat.len()
    }

    /// `[H P; W Y]`, `(N+M) × N̂`.
    fn stacked(&self, v: &ConvexVars) -> Vec<Vec<AffinePoly>> {
        let (nh, nv) = (self.nhat(), self.st.nv);
        let mut out = Vec::new();
        for i in 0..self.h.rows() {
            let row = (0..nh)
                .map(|j| {
                    let mut acc = AffinePoly::zero(nv);
                    for l in 0..nh {
                        let hil = self.h.get(i, l);
                        if !hil.is_zero() {
                            acc = acc.plus(&v.p[l][j].mul_poly(hil));
                        }
                    }
                    acc
                })
                .collect();
            out.push(row);
        }
        for i in 0..self.st.w.rows() {
            let row = (0..nh)
                .map(|j| {
                    let mut acc = AffinePoly::zero(nv);
                    for l in 0..self.st.m {
                        let wil = self.st.w.get(i, l);
                        if !wil.is_zero() {
                            acc = acc.plus(&v.y[l][j].mul_poly(wil));
                        }
                    }
                    acc
                })
                .collect();
            out.push(row);
        }
        out
    }

    /// `−E` for the block matrix `E` of the convex dissipation constraint.
    fn matrix(&self, v: &ConvexVars) -> AffinePolyMatrix {
        let st = &self.st;
        let (n, nv, nh, kd, e) = (st.n, st.nv, self.nhat(), st.k_dim(), st.e);
        let mm = self.stacked(v);
        // T = Mmᵀ ζ, N̂ × n
        let t: Vec<Vec<AffinePoly>> = (0..nh)
            .map(|a| {
                (0..n)
                    .map(|b| {
                        let mut acc = AffinePoly::zero(nv);
                        for (i, row) in mm.iter().enumerate() {
                            let z = st.zeta[(i, b)];
                            if z != 0.0 {
                                acc = acc.plus(&row[a].scale(z));
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        // J Q̄ Jᵀ
        let jq = {
            let q = PolyMatrix::from_constant(&st.q, nv);
            self.jac.try_mul(&q).and_then(|x| x.try_mul(&self.jac.transpose())).expect("jacobian shapes")
        };
        let size = nh + e + if self.robust { kd } else { 0 };
        let mut s = AffinePolyMatrix::zeros(size, size, nv);
        for a in 0..nh {
            for b in 0..nh {
                let mut acc = v.theta.get(a, b).clone();
                for c in 0..n {
                    let jb = self.jac.get(b, c);
                    if !jb.is_zero() {
                        acc = acc.plus(&t[a][c].mul_poly(jb));
                    }
                    let ja = self.jac.get(a, c);
                    if !ja.is_zero() {
                        acc = acc.plus(&t[b][c].mul_poly(ja));
                    }
                }
                if let Some(l) = &v.lambda {
                    acc = acc.plus(&l.mul_poly(jq.get(a, b)));
                }
                s.set(a, b, acc.scale(-1.0));
            }
        }
        // (2,1): [0; W]ᵀ ζ Jᵀ (actuator) or Jᵀ (process)
        for r in 0..e {
            for a in 0..nh {
                let entry = match st.kind.channel() {
                    Channel::Process => self.jac.get(a, r).clone(),
                    _ => {
                        let mut acc = Polynomial::zero(nv);
                        for c in 0..n {
                            let mut coef = Polynomial::zero(nv);
                            for i in 0..st.w.rows() {
                                let z = st.zeta[(st.z.len() + i, c)];
                                if z != 0.0 {
                                    coef = &coef + &st.w.get(i, r).scale(z);
                                }
                            }
                            acc = &acc + &(&coef * self.jac.get(a, c));
                        }
                        acc
                    }
                };
                let p = AffinePoly::from_poly(&entry.scale(-1.0));
                s.set(nh + r, a, p.clone());
                s.set(a, nh + r, p);
            }
        }
        for r in 0..e {
            for c in 0..e {
                s.set(nh + r, nh + c, v.gamma.get(r, c).clone());
            }
        }
        if self.robust {
            let l = v.lambda.as_ref().expect("robust programs carry a multiplier");
            for i in 0..kd {
                for a in 0..nh {
                    let p = mm[i][a].scale(-1.0);
                    s.set(nh + e + i, a, p.clone());
                    s.set(a, nh + e + i, p);
                }
                if st.kind.channel() == Channel::Actuator {
                    for r in 0..e {
                        let w = if i >= st.z.len() { st.w.get(i - st.z.len(), r).clone() } else { Polynomial::zero(nv) };
                        let p = AffinePoly::from_poly(&w.scale(-1.0));
                        s.set(nh + e + i, nh + r, p.clone());
                        s.set(nh + r, nh + e + i, p);
                    }
                }
                for j in 0..kd {
                    let c = st.abar[(i, j)];
                    s.set(nh + e + i, nh + e + j, l.scale(c));
                }
            }
        }
        s
    }
}

fn affine_const(nv: usize, e: &LinExpr) -> AffinePoly {
    let mut p = AffinePoly::zero(nv);
    p.add_term(Monomial::one(nv), e);
    p
}

fn fixed_vars(nv: usize, p: &DMatrix<f64>, y: &PolyMatrix, theta: &PolyMatrix, gamma: &PolyMatrix, lambda: Option<&Polynomial>) -> ConvexVars {
    let lift = |q: &Polynomial| AffinePoly::from_poly(&q.extend_vars(nv));
    ConvexVars {
        p: (0..p.nrows())
            .map(|i| (0..p.ncols()).map(|j| AffinePoly::from_poly(&Polynomial::constant(nv, p[(i, j)]))).collect())
            .collect(),
        y: (0..y.rows()).map(|i| (0..y.cols()).map(|j| lift(y.get(i, j))).collect()).collect(),
        theta: {
            let mut t = AffinePolyMatrix::zeros(theta.rows(), theta.cols(), nv);
            for i in 0..theta.rows() {
                for j in 0..theta.cols() {
                    t.set(i, j, lift(theta.get(i, j)));
                }
            }
            t
        },
        gamma: AffinePolyMatrix::from_poly_matrix(gamma),
        lambda: lambda.map(AffinePoly::from_poly),
    }
}

fn synth_convex(
    kind: CertificateKind,
    st: Setup,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
    robust: bool,
) -> Result<Certificate, SynthError> {
    cfg.validate()?;
    let program = kind.program();
    let cs = ConvexSetup::new(st, lib, robust)?;
    let st = &cs.st;
    let (n, nv, nh, e) = (st.n, st.nv, cs.nhat(), st.e);
    let xi = match &cfg.xi {
        Some(x) => x.clone().conform(n)?,
        None => outer_product(&cs.zhat, n),
    };
    if xi.rows() != nh || xi.cols() != nh || !xi.is_symmetric(1e-12) {
        return Err(SynthError::Config(format!("Xi must be a symmetric {nh}x{nh} polynomial matrix")));
    }
    let theta_deg = cfg.theta_max_degree.unwrap_or(xi.degree() + 2);

    let mut pr = SdpProblem::new();
    pr.set_group("P");
    let pb = pr.add_block("P", nh);
    let p_vars: Vec<Vec<AffinePoly>> = (0..nh)
        .map(|i| {
            (0..nh)
                .map(|j| {
                    let mut le = LinExpr::var(VarRef::entry(pb, i, j));
                    if i == j {
                        le.constant += cfg.p_margin;
                    }
                    affine_const(nv, &le)
                })
                .collect()
        })
        .collect();
    pr.set_group("Y");
    let ymonos = decision_monomials(n, n, DegreeRange::new(0, cfg.y_max_degree));
    let y_aff: Vec<Vec<AffinePoly>> = (0..st.m)
        .map(|i| (0..nh).map(|j| AffinePoly::decision(&mut pr, &format!("Y[{i},{j}]"), n, &ymonos).0).collect())
        .collect();
    pr.set_group("Theta");
    let tmonos = decision_monomials(n, n, DegreeRange::new(0, theta_deg));
    let mut theta_x = AffinePolyMatrix::zeros(nh, nh, n);
    for i in 0..nh {
        for j in i..nh {
            let (p, _) = AffinePoly::decision(&mut pr, &format!("Theta[{i},{j}]"), n, &tmonos);
            theta_x.set(i, j, p.clone());
            theta_x.set(j, i, p);
        }
    }
    pr.set_group("eta");
    let eta = pr.add_scalar("eta", Some(cfg.eta_min));
    // Γ(|e|) = Σ C_k |e|^{2k}; with gamma_scalar every C_k = c_k I.
    pr.set_group("Gamma");
    let enorm = Polynomial::squared_norm(nv, n..nv);
    let mut gamma = AffinePolyMatrix::zeros(e, e, nv);
    let mut gamma_blocks = Vec::new();
    let mut gamma_scalars = Vec::new();
    let mut sum = vec![vec![LinExpr::zero(); e]; e];
    let mut pw = Polynomial::constant(nv, 1.0);
    for k in 0..cfg.gamma_terms {
        if cfg.gamma_scalar {
            let c = pr.add_scalar(&format!("Gamma.c{k}"), Some(0.0));
            gamma_scalars.push(c);
            for i in 0..e {
                let le = LinExpr::var(VarRef::scalar(c));
                sum[i][i].add_scaled(&le, 1.0);
                let mut ap = AffinePoly::zero(nv);
                for (m, cc) in pw.terms() {
                    ap.add_term(m.clone(), &le.scaled(cc));
                }
                gamma.set(i, i, gamma.get(i, i).plus(&ap));
            }
        } else {
            let b = pr.add_block(&format!("Gamma.C{k}"), e);
            gamma_blocks.push(b);
            for i in 0..e {
                for j in 0..e {
                    let le = LinExpr::var(VarRef::entry(b, i, j));
                    sum[i][j].add_scaled(&le, 1.0);
                    let mut ap = AffinePoly::zero(nv);
                    for (m, cc) in pw.terms() {
                        ap.add_term(m.clone(), &le.scaled(cc));
                    }
                    gamma.set(i, j, gamma.get(i, j).plus(&ap));
                }
            }
        }
        pw = &pw * &enorm;
    }
    for (i, row) in sum.iter_mut().enumerate() {
        row[i].constant -= cfg.epsilon;
    }
    pr.add_lmi("Gamma.sum", &sum);
    let lambda = if robust {
        pr.set_group("lambda");
        let lmonos = if cfg.lambda_state_only {
            decision_monomials(n, nv, cfg.lambda_degree)
        } else {
            decision_monomials(nv, nv, cfg.lambda_degree)
        };
        Some(AffinePoly::decision(&mut pr, "lambda", nv, &lmonos).0)
    } else {
        None
    };
    let mut theta_nv = AffinePolyMatrix::zeros(nh, nh, nv);
    for i in 0..nh {
        for j in 0..nh {
            theta_nv.set(i, j, st.lift_affine(theta_x.get(i, j)));
        }
    }
    let vars = ConvexVars {
        p: p_vars,
        y: y_aff.iter().map(|row| row.iter().map(|a| st.lift_affine(a)).collect()).collect(),
        theta: theta_nv,
        gamma,
        lambda: lambda.clone(),
    };
    let eta_xi = {
        let mut m = AffinePolyMatrix::zeros(nh, nh, n);
        let le = LinExpr::var(VarRef::scalar(eta));
        for i in 0..nh {
            for j in 0..nh {
                let mut ap = AffinePoly::zero(n);
                for (mo, c) in xi.get(i, j).terms() {
                    ap.add_term(mo.clone(), &le.scaled(c));
                }
                m.set(i, j, ap);
            }
        }
        m
    };
    let mut constraints = Vec::new();
    if let Some(l) = &lambda {
        constraints.push(SosConstraint::scalar(
            "lambda",
            l.minus(&AffinePoly::from_poly(&Polynomial::constant(nv, cfg.epsilon))),
        ));
    }
    constraints.push(SosConstraint::matrix("theta", theta_x.plus(&eta_xi.scale(-1.0))));
    constraints.push(SosConstraint::matrix("dissipation", cs.matrix(&vars)));
    let compiled: Vec<CompiledSos> = constraints.iter().map(|c| sos::compile(&mut pr, c)).collect::<Result<_, _>>()?;
    pr.set_objective(objective_for(&compiled, &cfg.alternation, &[]));
    let mut stats = ProgramStats::default();
    let t0 = Instant::now();
    let sol = sdp::solve(&pr, solver)?;
    stats.absorb(&pr, &compiled, 1 + cfg.gamma_terms + 1, t0.elapsed().as_secs_f64());
    let rounds = vec![RoundReport {
        round: 1,
        step: "one-shot".into(),
        status: format!("{:?}", sol.status),
        verified: sol.status.is_feasible(),
        solve_time: sol.solve_time,
        variables: pr.num_variables(),
        note: sol.solver_status.clone(),
    }];
    if !sol.status.is_feasible() {
        return Err(infeasible(program, "one-shot program", &sol, "try another Xi or larger degrees for Y, Theta, lambda", &rounds));
    }

    let p = DMatrix::from_fn(nh, nh, |i, j| sol.value(&p_vars_value(pb, i, j, cfg.p_margin)));
    let p = (&p + p.transpose()) * 0.5;
    let y = {
        let mut y = PolyMatrix::zeros(st.m, nh, n);
        for i in 0..st.m {
            for j in 0..nh {
                y.set(i, j, y_aff[i][j].instantiate(&sol));
            }
        }
        y
    };
    let theta = theta_x.instantiate(&sol);
    let eta_v = sol.scalar(eta);
    let gamma_k = MatrixClassK {
        coeffs: if cfg.gamma_scalar {
            gamma_scalars.iter().map(|c| DMatrix::identity(e, e) * clamp_tiny(sol.scalar(*c))).collect()
        } else {
            gamma_blocks.iter().map(|b| sol.block(*b).clone()).collect()
        },
    };
    let lambda_v = lambda.as_ref().map(|l| l.instantiate(&sol));

    // Independent rebuild of each target from the rounded values.
    let gamma_pm = gamma_k.poly_matrix(nv, n..nv);
    let fixed = fixed_vars(nv, &p, &y, &theta, &gamma_pm, lambda_v.as_ref());
    let mut targets = BTreeMap::new();
    if let Some(l) = &lambda_v {
        targets.insert("lambda".to_string(), TargetInstance::Scalar(l - &Polynomial::constant(nv, cfg.epsilon)));
    }
    targets.insert("theta".to_string(), TargetInstance::Matrix(theta.try_sub(&xi.scale(eta_v))?));
    targets.insert("dissipation".to_string(), TargetInstance::Matrix(cs.matrix(&fixed).to_poly_matrix().expect("fixed data")));
    let grams: BTreeMap<String, SosCertificate> = compiled.iter().map(|c| (c.name.clone(), gram_of(c, &sol))).collect();
    let mut records = records_for(&targets, &grams);
    if let Some(bad) = records.iter().find(|r| !r.report.pass) {
        return Err(SynthError::Rejected(format!(
            "{program}: constraint {} fails re-verification (residual {:.3e}, min eig {:.3e})",
            bad.name, bad.report.residual, bad.report.min_eig
        )));
    }
    if !gamma_k.satisfies_constraints(cfg.epsilon) {
        return Err(SynthError::Rejected(format!("{program}: Gamma violates its matrix class-K conditions")));
    }

    let pinv = p
        .clone()
        .cholesky()
        .ok_or_else(|| SynthError::Rejected(format!("{program}: P is not positive definite")))?
        .inverse();
    let v = crate::poly::quadratic_form(&cs.zhat, &pinv)?;
    let pz: Vec<Polynomial> = (0..nh)
        .map(|i| {
            let mut acc = Polynomial::zero(n);
            for (j, zj) in cs.zhat.iter().enumerate() {
                acc = &acc + &zj.scale(pinv[(i, j)]);
            }
            acc
        })
        .collect();
    let k: Vec<Polynomial> = (0..st.m)
        .map(|i| {
            let mut acc = Polynomial::zero(n);
            for (j, pzj) in pz.iter().enumerate() {
                acc = &acc + &(y.get(i, j) * pzj);
            }
            acc
        })
        .collect();
    let a = quadratic_form_poly(&pz, &theta)?;
    let b = quadratic_form_poly(&pz, &xi)?;
    let pd_check = check_pd_ru(&cs.zhat, &p, &xi, solver).map_err(|e| SynthError::Verify(Box::new(e)))?;
    if !pd_check.pass {
        return Err(SynthError::Rejected(format!(
            "{program}: b(x) = Zhat' P^-1 Xi P^-1 Zhat is not shown positive definite and radially unbounded; choose Xi closer to Zhat Zhat'"
        )));
    }

    let (alphas, aux) = extract_alphas(&v, &a, &gamma_k, n, cfg, solver)?;
    records.extend(aux);
    let cert = Certificate {
        kind,
        n,
        m: st.m,
        k,
        v,
        alphas,
        lambda: lambda_v,
        convex: Some(ConvexParts { p, y, theta, gamma: gamma_k, eta: eta_v, zhat: cs.zhat.clone(), xi, a, b, pd_check }),
        sos: records,
        rounds,
        stats,
        config: cfg.clone(),
        config_hash: String::new(),
        model_hash: String::new(),
        dataset_hash: String::new(),
    };
    cert.check_invariants().map_err(SynthError::Rejected)?;
    Ok(cert)
}

fn p_vars_value(pb: sdp::BlockId, i: usize, j: usize, margin: f64) -> LinExpr {
    let mut le = LinExpr::var(VarRef::entry(pb, i, j));
    if i == j {
        le.constant += margin;
    }
    le
}

/// `uᵀ M u` for polynomial `u` and polynomial matrix `M`.
fn quadratic_form_poly(u: &[Polynomial], m: &PolyMatrix) -> Result<Polynomial, PolyError> {
    let nv = u.first().map_or(m.nvars(), |p| p.nvars());
    let mut acc = Polynomial::zero(nv);
    for i in 0..u.len() {
        for j in 0..u.len() {
            let mij = m.get(i, j);
            if !mij.is_zero() {
                acc = acc.try_add(&u[i].try_mul(mij)?.try_mul(&u[j])?)?;
            }
        }
    }
    Ok(acc)
}

/// Convex ISS program for an actuator disturbance.
pub fn synth_iss_actuator_convex(
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    let st = Setup::from_model(CertificateKind::IssActuatorConvex, model, lib)?;
    let mut cert = synth_convex(CertificateKind::IssActuatorConvex, st, lib, cfg, solver, true)?;
    cert.dataset_hash = model.dataset_hash.clone();
    Ok(cert)
}

/// Convex ISS program for a process disturbance.
pub fn synth_iss_process_convex(
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    let st = Setup::from_model(CertificateKind::IssProcessConvex, model, lib)?;
    let mut cert = synth_convex(CertificateKind::IssProcessConvex, st, lib, cfg, solver, true)?;
    cert.dataset_hash = model.dataset_hash.clone();
    Ok(cert)
}

/// Convex actuator-ISS program with the true `(A⋆, B⋆)` in place of the
/// data-based ellipsoid.
pub fn synth_modelbased_convex(
    sys: &TrueSystem,
    lib: &FunctionLibrary,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<Certificate, SynthError> {
    sys.validate().map_err(|e| SynthError::Config(e.to_string()))?;
    let zeta = sys.ab().transpose();
    let k = zeta.nrows();
    let n = zeta.ncols();
    let st = Setup::new(CertificateKind::ModelBased, zeta, DMatrix::identity(n, n), DMatrix::identity(k, k), lib)?;
    synth_convex(CertificateKind::ModelBased, st, lib, cfg, solver, false)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    /// `p − α(|x|)` SOS, maximize `Σ c`.
    Below,
    /// `α(|x|) − p` SOS, minimize `Σ c`.
    Above,
}

fn fit_alpha(
    name: &str,
    p: &Polynomial,
    n: usize,
    terms: usize,
    side: Side,
    backoff: f64,
    solver: &SolverConfig,
) -> Result<Option<(ClassKInfty, SosRecord)>, SynthError> {
    let build = |fixed: Option<&ClassKInfty>| -> Result<(SdpProblem, Vec<ScalarId>, CompiledSos), SynthError> {
        let mut pr = SdpProblem::new();
        pr.set_group(name);
        let (alpha, ids) = match fixed {
            Some(a) => (AffinePoly::from_poly(&a.poly(n, 0..n)), vec![]),
            None => {
                let ids: Vec<ScalarId> =
                    (0..terms).map(|k| pr.add_scalar(&format!("{name}.c{}", k + 1), Some(0.0))).collect();
                (alpha_affine(&ids, n, 0..n), ids)
            }
        };
        let pa = AffinePoly::from_poly(p);
        let target = match side {
            Side::Below => pa.minus(&alpha),
            Side::Above => alpha.minus(&pa),
        };
        let c = sos::compile(&mut pr, &SosConstraint::scalar(name, target))?;
        if fixed.is_none() {
            let mut obj = LinExpr::zero();
            for id in &ids {
                obj.add_term(VarRef::scalar(*id), if side == Side::Below { -1.0 } else { 1.0 });
            }
            pr.set_objective(obj);
        }
        Ok((pr, ids, c))
    };
    let (pr, ids, _) = match build(None) {
        Ok(b) => b,
        Err(SynthError::Sos(SosError::Unrepresentable { .. })) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sol = sdp::solve(&pr, solver)?;
    if !sol.status.is_feasible() {
        return Ok(None);
    }
    let best = read_alpha(&sol, &ids);
    let factor = if side == Side::Below { 1.0 - backoff } else { 1.0 + backoff };
    let alpha = ClassKInfty::new(best.coeffs.iter().map(|c| c * factor).collect());
    if !alpha.satisfies_lemma(0.0) {
        return Ok(None);
    }
    let (pr2, _, c2) = build(Some(&alpha))?;
    let sol2 = sdp::solve(&pr2, solver)?;
    if !sol2.status.is_feasible() {
        return Ok(None);
    }
    let target = match side {
        Side::Below => p - &alpha.poly(n, 0..n),
        Side::Above => &alpha.poly(n, 0..n) - p,
    };
    let record = SosRecord::new(name, TargetInstance::Scalar(target), &gram_of(&c2, &sol2));
    if !record.report.pass {
        return Ok(None);
    }
    Ok(Some((alpha, record)))
}

fn fit_alpha_retry(
    name: &str,
    p: &Polynomial,
    n: usize,
    side: Side,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<(ClassKInfty, SosRecord), SynthError> {
    let base = (p.degree() as usize).div_ceil(2).max(1);
    for terms in [base, base + 1] {
        if let Some(r) = fit_alpha(name, p, n, terms, side, cfg.extraction_backoff, solver)? {
            return Ok(r);
        }
    }
    Err(SynthError::Rejected(format!("auxiliary SOS program for {name} is infeasible")))
}

fn extract_alphas(
    v: &Polynomial,
    a: &Polynomial,
    gamma: &MatrixClassK,
    n: usize,
    cfg: &SynthConfig,
    solver: &SolverConfig,
) -> Result<(Vec<ClassKInfty>, Vec<SosRecord>), SynthError> {
    let (a1, r1) = fit_alpha_retry("alpha1", v, n, Side::Below, cfg, solver)?;
    let (a2, r2) = fit_alpha_retry("alpha2", v, n, Side::Above, cfg, solver)?;
    let (a3, r3) = fit_alpha_retry("alpha3", a, n, Side::Below, cfg, solver)?;
    Ok((vec![a1, a2, a3, gamma.alpha()], vec![r1, r2, r3]))
}

/// `α₁..α₄` of a convex-path certificate: `V − α₁`, `α₂ − V` and `a − α₃`
/// are certified SOS with `αᵢ` of class-K∞ form; `α₄` comes from `Γ`.
pub fn extract_comparison_functions(
    cert: &Certificate,
    solver: &SolverConfig,
) -> Result<Vec<ClassKInfty>, SynthError> {
    let c = cert
        .convex
        .as_ref()
        .ok_or_else(|| SynthError::Config("comparison-function extraction needs a convex-path certificate".into()))?;
    Ok(extract_alphas(&cert.v, &c.a, &c.gamma, cert.n, &cert.config, solver)?.0)
}

/// `k̃ = k − (ρ / 2m) (∂V/∂x · B W)ᵀ` with `ρ = −∂V/∂x · (A Z + B W k)`.
pub fn sontag_redesign(ab: &DMatrix<f64>, lib: &FunctionLibrary, k: &[Polynomial], v: &Polynomial) -> Vec<Polynomial> {
    let n = lib.nvars;
    let m = lib.n_inputs();
    let nz = lib.n_z();
    let grad = v.gradient(n);
    // A Z + B W k
    let mut f = vec![Polynomial::zero(n); n];
    let mut bw = vec![vec![Polynomial::zero(n); m]; n];
    for (i, fi) in f.iter_mut().enumerate() {
        for (j, zj) in lib.z.iter().enumerate() {
            *fi = &*fi + &zj.scale(ab[(i, j)]);
        }
        for l in 0..lib.n_w() {
            let b = ab[(i, nz + l)];
            if b == 0.0 {
                continue;
            }
            for (c, kc) in k.iter().enumerate() {
                *fi = &*fi + &(lib.w.get(l, c) * kc).scale(b);
                bw[i][c] = &bw[i][c] + &lib.w.get(l, c).scale(b);
            }
        }
    }
    let mut rho = Polynomial::zero(n);
    for (g, fi) in grad.iter().zip(&f) {
        rho = &rho - &(g * fi);
    }
    (0..m)
        .map(|c| {
            let mut lgv = Polynomial::zero(n);
            for (g, row) in grad.iter().zip(&bw) {
                lgv = &lgv + &(g * &row[c]);
            }
            &k[c] - &(&rho * &lgv).scale(1.0 / (2.0 * m as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_k_polynomial_matches_evaluation() {
        let a = ClassKInfty::new(vec![0.5, 2.0]);
        let p = a.poly(2, 0..2);
        let x = [0.3, -1.2];
        let r = (0.09f64 + 1.44).sqrt();
        assert!((p.eval(&x).unwrap() - a.eval(r)).abs() < 1e-12);
        assert!(a.satisfies_lemma(1.0));
        assert!(!ClassKInfty::new(vec![0.0, 0.0]).satisfies_lemma(0.0));
        assert!(!ClassKInfty::new(vec![1.0, -0.1]).satisfies_lemma(0.0));
        assert!(!ClassKInfty::new(vec![1e-4]).satisfies_lemma(1e-3));
    }

    #[test]
    fn gamma_alpha_bounds_quadratic_form() {
        let g = MatrixClassK {
            coeffs: vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])],
        };
        let a4 = g.alpha();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let lhs = (w.transpose() * g.eval(w.norm()) * &w)[(0, 0)];
            assert!(lhs <= a4.eval(w.norm()) + 1e-9);
        }
        assert!(g.satisfies_constraints(1.0));
    }

    #[test]
    fn sontag_formula_degenerates_without_input_direction() {
        let lib = crate::benchmark::library();
        let ab = DMatrix::from_row_slice(2, 5, &[-1.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0]);
        let v = Polynomial::var(2, 0).pow(2);
        let k = vec![Polynomial::zero(2)];
        assert_eq!(sontag_redesign(&ab, &lib, &k, &v), k);
    }

    #[test]
    fn sontag_scalar_input_formula() {
        let lib = crate::benchmark::library();
        let ab = crate::benchmark::system().ab();
        let x = |i| Polynomial::var(2, i);
        let v = &x(0).pow(2) + &x(1).pow(2);
        let k = crate::benchmark::initial_controller();
        let kt = sontag_redesign(&ab, &lib, &k, &v);
        let p = [0.7, -0.4];
        let grad = [2.0 * p[0], 2.0 * p[1]];
        let u = k[0].eval(&p).unwrap();
        let f = ab.clone() * lib.regressor(&p, &[u]).unwrap();
        let rho = -(grad[0] * f[0] + grad[1] * f[1]);
        let lgv = grad[1];
        assert!((kt[0].eval(&p).unwrap() - (u - rho / 2.0 * lgv)).abs() < 1e-12);
        assert!(kt[0].degree() <= v.degree() - 1 + rho.abs().max(1.0) as u32 + 6);
    }

    #[test]
    fn restricted_gram_drops_frozen_variables() {
        let basis = vec![Monomial::new(vec![1, 0]), Monomial::new(vec![0, 1]), Monomial::new(vec![1, 1])];
        let gram = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.2, 0.1, 3.0, 0.3, 0.2, 0.3, 4.0]);
        let r = restrict_gram(&SosCertificate { gram, basis, residual: 0.0 }, 1..2);
        assert_eq!(r.basis, vec![Monomial::new(vec![1])]);
        assert_eq!(r.gram[(0, 0)], 2.0);
    }

    #[test]
    fn program_names_round_trip() {
        for k in CertificateKind::ALL {
            assert_eq!(CertificateKind::from_program(k.program()), Some(k));
        }
        assert_eq!(CertificateKind::from_program("nope"), None);
    }
}
