//! Independent checks of synthesized certificates: closed-loop simulation,
//! dissipation tracing along trajectories, robust sampling over the
//! ellipsoid, sandwich bounds, and positivity of `b(x)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{sym_pow, EllipsoidModel};
use crate::data::{rk4_integrate, uniform_ball, DataError, Signal, Trajectory, TrueSystem, DEFAULT_GUARD};
use crate::poly::{FunctionLibrary, PolyError, PolyMatrix, Polynomial};
use crate::sdp::{self, LinExpr, SdpProblem, SolverConfig, VarRef};
use crate::sos::{self, AffinePoly, SosConstraint, SosError, SosReport, TargetInstance};
use crate::synth::{Certificate, Channel};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error("{0}")]
    Invalid(String),
    #[error("closed loop diverged at t = {0}")]
    Diverged(f64),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMethod {
    /// `b − ε′ρ` certified SOS for a positive definite, radially unbounded `ρ`.
    Sos,
    /// No SOS certificate found; positivity only sampled on shells.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdCheck {
    pub pass: bool,
    pub method: PdMethod,
    pub epsilon: f64,
    pub rho: String,
    pub report: Option<SosReport>,
    pub min_sample: Option<f64>,
}

/// Smallest `ε′` accepted by [`check_pd_ru`].
pub const PD_EPSILON_MIN: f64 = 1e-6;

fn pd_candidates(zhat: &[Polynomial], b: &Polynomial, n: usize) -> Vec<(String, Polynomial)> {
    let mut out = Vec::new();
    let s: Polynomial = zhat.iter().fold(Polynomial::zero(n), |acc, z| &acc + &(z * z));
    out.push(("(Zhat'Zhat)^2".to_string(), &s * &s));
    let r2 = Polynomial::squared_norm(n, 0..n);
    let (lo, hi) = (b.min_degree(), b.degree());
    if lo % 2 == 0 && hi % 2 == 0 && lo > 0 {
        let rho = if lo == hi { r2.pow(lo / 2) } else { &r2.pow(lo / 2) + &r2.pow(hi / 2) };
        out.push((format!("|x|^{lo} + |x|^{hi}"), rho));
    }
    out
}

fn pd_sos(b: &Polynomial, rho: &Polynomial, solver: &SolverConfig) -> Result<Option<(f64, SosReport)>, VerifyError> {
    let build = |eps: Option<f64>| -> Result<(SdpProblem, Option<sdp::ScalarId>, sos::CompiledSos), SosError> {
        let mut pr = SdpProblem::new();
        pr.set_group("pd");
        let (target, id) = match eps {
            Some(e) => (AffinePoly::from_poly(&(b - &rho.scale(e))), None),
            None => {
                let id = pr.add_scalar("eps", Some(PD_EPSILON_MIN));
                let mut ub = LinExpr::constant(1e6);
                ub.add_term(VarRef::scalar(id), -1.0);
                pr.add_nonnegative("eps.ub", &ub);
                let le = LinExpr::var(VarRef::scalar(id));
                let mut t = AffinePoly::from_poly(b);
                for (m, c) in rho.terms() {
                    t.add_term(m.clone(), &le.scaled(-c));
                }
                pr.set_objective(le.scaled(-1.0));
                (t, Some(id))
            }
        };
        let c = sos::compile(&mut pr, &SosConstraint::scalar("pd", target))?;
        Ok((pr, id, c))
    };
    let (pr, id, _) = match build(None) {
        Ok(p) => p,
        Err(SosError::Unrepresentable { .. } | SosError::OddDegree(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let sol = sdp::solve(&pr, solver)?;
    if !sol.status.is_feasible() {
        return Ok(None);
    }
    let eps = 0.5 * sol.scalar(id.expect("free epsilon"));
    if eps < PD_EPSILON_MIN {
        return Ok(None);
    }
    let (pr2, _, c) = build(Some(eps))?;
    let sol2 = sdp::solve(&pr2, solver)?;
    if !sol2.status.is_feasible() {
        return Ok(None);
    }
    let cert = c.certificate(&sol2);
    let report = sos::verify_certificate(&TargetInstance::Scalar(b - &rho.scale(eps)), &cert);
    Ok(report.pass.then_some((eps, report)))
}

/// Shows `b(x) = Ẑᵀ P⁻¹ Ξ P⁻¹ Ẑ` positive definite and radially unbounded
/// by certifying `b − ε′ρ` SOS with `ε′ ≥ 1e-6`, trying `ρ = (ẐᵀẐ)²` first
/// and `|x|^{deg_min b} + |x|^{deg b}` next; falls back to sampling
/// `b > 0` on the shells `|x| ∈ {0.1, 1, 10}`.
pub fn check_pd_ru(zhat: &[Polynomial], p: &DMatrix<f64>, xi: &PolyMatrix, solver: &SolverConfig) -> Result<PdCheck, VerifyError> {
    let nh = zhat.len();
    if p.shape() != (nh, nh) || xi.rows() != nh || xi.cols() != nh {
        return Err(VerifyError::Invalid("P, Xi and Zhat dimensions disagree".into()));
    }
    let n = zhat.first().map_or(xi.nvars(), |z| z.nvars());
    let pinv = p.clone().cholesky().ok_or_else(|| VerifyError::Invalid("P is not positive definite".into()))?.inverse();
    let pz: Vec<Polynomial> = (0..nh)
        .map(|i| zhat.iter().enumerate().fold(Polynomial::zero(n), |acc, (j, z)| &acc + &z.scale(pinv[(i, j)])))
        .collect();
    let mut b = Polynomial::zero(n);
    for i in 0..nh {
        for j in 0..nh {
            b = &b + &(&(&pz[i] * xi.get(i, j)) * &pz[j]);
        }
    }
    let b = b.prune(0.0);
    if !b.is_zero() {
        for (name, rho) in pd_candidates(zhat, &b, n) {
            if let Some((eps, report)) = pd_sos(&b, &rho, solver)? {
                return Ok(PdCheck { pass: true, method: PdMethod::Sos, epsilon: eps, rho: name, report: Some(report), min_sample: None });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut min_sample = f64::INFINITY;
    for radius in [0.1, 1.0, 10.0] {
        for _ in 0..1000 {
            let dir = uniform_ball(n, 1.0, &mut rng);
            let nrm = dir.norm();
            if nrm == 0.0 {
                continue;
            }
            let x = dir * (radius / nrm);
            min_sample = min_sample.min(b.eval(x.as_slice())?);
        }
    }
    Ok(PdCheck {
        pass: min_sample > 0.0,
        method: PdMethod::Sampled,
        epsilon: 0.0,
        rho: String::new(),
        report: None,
        min_sample: Some(min_sample),
    })
}

/// Simulates the true system in closed loop with `k` and the exogenous
/// input `exo` entering the certificate's channel.
pub fn simulate_closed_loop(
    sys: &TrueSystem,
    cert: &Certificate,
    exo: &Signal,
    x0: &[f64],
    horizon: f64,
    step: f64,
) -> Result<Trajectory, VerifyError> {
    let (n, m) = (sys.n(), sys.m());
    if x0.len() != n || cert.n != n || cert.m != m {
        return Err(VerifyError::Invalid("certificate, system and initial state dimensions disagree".into()));
    }
    if exo.dim() != cert.exo_dim() {
        return Err(VerifyError::Invalid(format!("exogenous signal has dimension {}, expected {}", exo.dim(), cert.exo_dim())));
    }
    let channel = cert.kind.channel();
    let field = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let mut u = cert.controller(x.as_slice());
        let mut d = DVector::zeros(n);
        let e = exo.at(t);
        match channel {
            Channel::Actuator => u += &e,
            Channel::Process => d = e,
            Channel::None => {}
        }
        sys.rhs(x.as_slice(), u.as_slice(), d.as_slice()).unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
    };
    Ok(rk4_integrate(field, &DVector::from_column_slice(x0), horizon, step, DEFAULT_GUARD)?)
}

/// `V̇`, the dissipation bound `−α₃(|x|) + α₄(|e|)` and their gap along a
/// trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationTrace {
    pub times: Vec<f64>,
    pub vdot: Vec<f64>,
    pub bound: Vec<f64>,
    /// `bound − V̇`; nonnegative wherever the certificate holds.
    pub margin: Vec<f64>,
    /// Largest gap between finite-difference `ΔV/h` and the trapezoidal
    /// average of `V̇`, relative to `1 + |V̇|`.
    pub fd_mismatch: f64,
    pub diverged: bool,
}

impl DissipationTrace {
    pub fn min_margin(&self) -> f64 {
        self.margin.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.diverged && self.min_margin() >= -tol
    }

    /// CSV with header `t,Vdot,bound,margin`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), VerifyError> {
        writeln!(w, "t,Vdot,bound,margin")?;
        for i in 0..self.times.len() {
            writeln!(w, "{},{},{},{}", self.times[i], self.vdot[i], self.bound[i], self.margin[i])?;
        }
        Ok(())
    }
}

/// Evaluates `V̇` for the true system along `traj`.
pub fn dissipation_trace(traj: &Trajectory, sys: &TrueSystem, cert: &Certificate, exo: &Signal) -> Result<DissipationTrace, VerifyError> {
    let ab = sys.ab();
    let lib = &sys.library;
    let mut out = DissipationTrace {
        times: Vec::new(),
        vdot: Vec::new(),
        bound: Vec::new(),
        margin: Vec::new(),
        fd_mismatch: 0.0,
        diverged: traj.diverged,
    };
    let mut values = Vec::new();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let e = exo.at(*t);
        let vdot = cert.vdot(lib, &ab, x.as_slice(), e.as_slice())?;
        let bound = cert.bound(x.as_slice(), e.as_slice());
        out.times.push(*t);
        out.vdot.push(vdot);
        out.bound.push(bound);
        out.margin.push(bound - vdot);
        values.push(cert.v.eval(x.as_slice())?);
    }
    for k in 1..values.len() {
        let fd = (values[k] - values[k - 1]) / traj.step;
        let avg = 0.5 * (out.vdot[k] + out.vdot[k - 1]);
        out.fd_mismatch = out.fd_mismatch.max((fd - avg).abs() / (1.0 + avg.abs()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub samples: usize,
    pub x_radius: f64,
    pub exo_radius: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { samples: 1000, x_radius: 3.0, exo_radius: 1.0, seed: 0, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    /// Smallest `−α₃ + α₄ − V̇` over random draws of `(x, e, Υ)`.
    pub worst_margin: f64,
    /// Smallest margin with `Υ` chosen to maximize `V̇` at each sample.
    pub worst_adversarial: f64,
    pub worst_x: Vec<f64>,
    pub worst_exo: Vec<f64>,
    pub samples: usize,
    pub pass: bool,
}

fn margin(cert: &Certificate, lib: &FunctionLibrary, ab: &DMatrix<f64>, x: &[f64], e: &[f64]) -> Result<f64, VerifyError> {
    Ok(cert.bound(x, e) - cert.vdot(lib, ab, x, e)?)
}

fn random_upsilon<R: Rng>(rows: usize, cols: usize, boundary: bool, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let s = g.singular_values().max();
    if s == 0.0 {
        return g;
    }
    let r = if boundary { 1.0 } else { rng.random::<f64>() };
    g * (r / s)
}

/// Samples `|x| ≤ x_radius`, `|e| ≤ exo_radius` and `‖Υ‖ ≤ 1` (every tenth
/// `Υ` on the boundary) and evaluates the dissipation margin for the
/// ellipsoid member `ζ̄ + Ā^{-1/2} Υ Q̄^{1/2}`. Each sample also evaluates the
/// maximizing `Υ`, which has the closed form `b aᵀ / (|a||b|)`.
pub fn robust_sample_check(
    cert: &Certificate,
    model: &EllipsoidModel,
    lib: &FunctionLibrary,
    cfg: &SamplingConfig,
) -> Result<SampleReport, VerifyError> {
    let (n, k) = (model.n(), model.k());
    if cert.n != n || lib.n_z() + lib.n_w() != k {
        return Err(VerifyError::Invalid("certificate, model and library dimensions disagree".into()));
    }
    let e_dim = cert.exo_dim();
    let a_inv_half = model.abar_inv_sqrt();
    let q_half = sym_pow(&model.qbar, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = SampleReport {
        worst_margin: f64::INFINITY,
        worst_adversarial: f64::INFINITY,
        worst_x: vec![],
        worst_exo: vec![],
        samples: cfg.samples,
        pass: false,
    };
    for i in 0..cfg.samples {
        let x = uniform_ball(n, cfg.x_radius, &mut rng);
        let e = uniform_ball(e_dim, cfg.exo_radius, &mut rng);
        let ups = random_upsilon(k, n, i % 10 == 0, &mut rng);
        let ab = model.member(&ups).transpose();
        let mg = margin(cert, lib, &ab, x.as_slice(), e.as_slice())?;
        if mg < report.worst_margin {
            report.worst_margin = mg;
            report.worst_x = x.as_slice().to_vec();
            report.worst_exo = e.as_slice().to_vec();
        }
        // adversarial Υ
        let mut u = cert.controller(x.as_slice());
        if cert.kind.channel() == Channel::Actuator {
            u += &e;
        }
        let g = lib.regressor(x.as_slice(), u.as_slice())?;
        let grad = DVector::from_iterator(n, (0..n).map(|j| cert.v.derivative(j).eval(x.as_slice()).unwrap_or(f64::NAN)));
        let a = &q_half * grad;
        let b = &a_inv_half * g;
        let (na, nb) = (a.norm(), b.norm());
        let ups_star = if na > 0.0 && nb > 0.0 { &b * a.transpose() / (na * nb) } else { DMatrix::zeros(k, n) };
        let ab_star = model.member(&ups_star).transpose();
        let ma = margin(cert, lib, &ab_star, x.as_slice(), e.as_slice())?;
        report.worst_adversarial = report.worst_adversarial.min(ma);
    }
    report.pass = report.worst_margin >= -cfg.tolerance && report.worst_adversarial >= -cfg.tolerance;
    Ok(report)
}

/// Dissipation margin for a single known model `[A B] = ab`.
pub fn model_sample_check(
    cert: &Certificate,
    ab: &DMatrix<f64>,
    lib: &FunctionLibrary,
    cfg: &SamplingConfig,
) -> Result<SampleReport, VerifyError> {
    let n = cert.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = SampleReport {
        worst_margin: f64::INFINITY,
        worst_adversarial: f64::INFINITY,
        worst_x: vec![],
        worst_exo: vec![],
        samples: cfg.samples,
        pass: false,
    };
    for _ in 0..cfg.samples {
        let x = uniform_ball(n, cfg.x_radius, &mut rng);
        let e = uniform_ball(cert.exo_dim(), cfg.exo_radius, &mut rng);
        let mg = margin(cert, lib, ab, x.as_slice(), e.as_slice())?;
        if mg < report.worst_margin {
            report.worst_margin = mg;
            report.worst_x = x.as_slice().to_vec();
            report.worst_exo = e.as_slice().to_vec();
        }
    }
    report.worst_adversarial = report.worst_margin;
    report.pass = report.worst_margin >= -cfg.tolerance;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    /// Smallest `V(x) − α₁(|x|)`.
    pub lower: f64,
    /// Smallest `α₂(|x|) − V(x)`.
    pub upper: f64,
    pub pass: bool,
}

/// Samples `α₁(|x|) ≤ V(x) ≤ α₂(|x|)` on `|x| ≤ x_radius`.
pub fn sandwich_check(cert: &Certificate, cfg: &SamplingConfig) -> Result<SandwichReport, VerifyError> {
    let (a1, a2) = match (cert.alpha(1), cert.alpha(2)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(VerifyError::Invalid("certificate lacks alpha1/alpha2".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a);
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    for _ in 0..cfg.samples {
        let x = uniform_ball(cert.n, cfg.x_radius, &mut rng);
        let v = cert.v.eval(x.as_slice())?;
        let r = x.norm();
        lower = lower.min(v - a1.eval(r));
        upper = upper.min(a2.eval(r) - v);
    }
    Ok(SandwichReport { lower, upper, pass: lower >= -cfg.tolerance && upper >= -cfg.tolerance })
}
