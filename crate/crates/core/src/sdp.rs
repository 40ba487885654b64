//! Semidefinite programs in a block-structured standard form.
//!
//! Decision variables are free or lower-bounded scalars plus symmetric PSD
//! blocks. Constraints are affine equalities over those variables. Problems
//! are handed to the Clarabel interior-point solver and every returned point
//! is re-checked independently before it is reported as feasible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("solver setup failed: {0}")]
    Setup(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScalarId(pub usize);

/// A single decision variable. Block entries are stored with `row <= col`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarRef {
    Scalar(usize),
    Entry { block: usize, row: usize, col: usize },
}

impl VarRef {
    pub fn entry(block: BlockId, i: usize, j: usize) -> VarRef {
        let (row, col) = if i <= j { (i, j) } else { (j, i) };
        VarRef::Entry { block: block.0, row, col }
    }

    pub fn scalar(s: ScalarId) -> VarRef {
        VarRef::Scalar(s.0)
    }
}

/// Affine expression `constant + Σ coeff·var`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    terms: BTreeMap<VarRef, f64>,
}

impl LinExpr {
    pub fn zero() -> Self {
        LinExpr::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { constant: c, terms: BTreeMap::new() }
    }

    pub fn var(v: VarRef) -> Self {
        let mut e = LinExpr::zero();
        e.add_term(v, 1.0);
        e
    }

    pub fn add_term(&mut self, v: VarRef, c: f64) {
        if c == 0.0 {
            return;
        }
        let slot = self.terms.entry(v).or_insert(0.0);
        *slot += c;
        if *slot == 0.0 {
            self.terms.remove(&v);
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.constant += s * other.constant;
        for (&v, &c) in &other.terms {
            self.add_term(v, s * c);
        }
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut out = LinExpr::zero();
        out.add_scaled(self, s);
        out
    }

    pub fn plus(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn minus(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn terms(&self) -> impl Iterator<Item = (VarRef, f64)> + '_ {
        self.terms.iter().map(|(&v, &c)| (v, c))
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(self.constant.abs(), |a, c| a.max(c.abs()))
    }
}

#[derive(Clone, Debug)]
struct Equality {
    expr: LinExpr,
    group: usize,
}

/// Block-structured SDP: minimize a linear objective (or maximize log det of
/// one block) subject to affine equalities, scalar lower bounds and PSD blocks.
#[derive(Clone, Debug, Default)]
pub struct SdpProblem {
    blocks: Vec<(String, usize)>,
    scalars: Vec<(String, Option<f64>)>,
    equalities: Vec<Equality>,
    groups: Vec<String>,
    current_group: usize,
    objective: LinExpr,
    logdet: Option<BlockId>,
}

impl SdpProblem {
    pub fn new() -> Self {
        SdpProblem { groups: vec!["default".to_string()], ..Default::default() }
    }

    /// Tags subsequently added equalities with `name` for diagnostics.
    pub fn set_group(&mut self, name: &str) {
        if let Some(i) = self.groups.iter().position(|g| g == name) {
            self.current_group = i;
        } else {
            self.groups.push(name.to_string());
            self.current_group = self.groups.len() - 1;
        }
    }

    pub fn add_block(&mut self, name: &str, dim: usize) -> BlockId {
        self.blocks.push((name.to_string(), dim));
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_scalar(&mut self, name: &str, lower: Option<f64>) -> ScalarId {
        self.scalars.push((name.to_string(), lower));
        ScalarId(self.scalars.len() - 1)
    }

    /// Adds `expr == 0`.
    pub fn add_equality(&mut self, expr: LinExpr) {
        self.equalities.push(Equality { expr, group: self.current_group });
    }

    /// Adds `expr >= 0` through a nonnegative slack.
    pub fn add_nonnegative(&mut self, name: &str, expr: &LinExpr) -> ScalarId {
        let s = self.add_scalar(name, Some(0.0));
        let mut e = expr.clone();
        e.add_term(VarRef::scalar(s), -1.0);
        self.add_equality(e);
        s
    }

    /// Constrains the symmetric affine matrix `m` (upper triangle read) to be
    /// PSD by equating it to a fresh block, which is returned.
    pub fn add_lmi(&mut self, name: &str, m: &[Vec<LinExpr>]) -> BlockId {
        let d = m.len();
        let b = self.add_block(name, d);
        for i in 0..d {
            for j in i..d {
                let mut e = m[i][j].clone();
                e.add_term(VarRef::entry(b, i, j), -1.0);
                self.add_equality(e);
            }
        }
        b
    }

    pub fn set_objective(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    /// Replaces the linear objective by `maximize log det X` for block `b`.
    pub fn set_logdet_objective(&mut self, b: BlockId) {
        self.logdet = Some(b);
    }

    pub fn logdet_block(&self) -> Option<BlockId> {
        self.logdet
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_dim(&self, b: BlockId) -> usize {
        self.blocks[b.0].1
    }

    pub fn block_name(&self, b: BlockId) -> &str {
        &self.blocks[b.0].0
    }

    pub fn num_scalars(&self) -> usize {
        self.scalars.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    /// Total number of scalar decision variables, counting block entries.
    pub fn num_variables(&self) -> usize {
        self.scalars.len() + self.blocks.iter().map(|(_, d)| d * (d + 1) / 2).sum::<usize>()
    }

    fn validate(&self) -> Result<(), SdpError> {
        for (name, d) in &self.blocks {
            if *d == 0 {
                return Err(SdpError::Malformed(format!("block {name} has dimension 0")));
            }
        }
        let check = |e: &LinExpr| -> Result<(), SdpError> {
            for (v, c) in e.terms() {
                if !c.is_finite() {
                    return Err(SdpError::Malformed("non-finite coefficient".into()));
                }
                match v {
                    VarRef::Scalar(i) if i >= self.scalars.len() => {
                        return Err(SdpError::Malformed(format!("unknown scalar {i}")));
                    }
                    VarRef::Entry { block, col, .. }
                        if (block >= self.blocks.len() || col >= self.blocks[block].1) => {
                            return Err(SdpError::Malformed(format!("entry outside block {block}")));
                        }
                    _ => {}
                }
            }
            if !e.constant.is_finite() {
                return Err(SdpError::Malformed("non-finite constant".into()));
            }
            Ok(())
        };
        for eq in &self.equalities {
            check(&eq.expr)?;
        }
        check(&self.objective)?;
        if let Some(b) = self.logdet {
            if b.0 >= self.blocks.len() {
                return Err(SdpError::Malformed("log-det objective names an unknown block".into()));
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut next = self.scalars.len();
        for (_, d) in &self.blocks {
            offsets.push(next);
            next += d * (d + 1) / 2;
        }
        Layout { offsets, dims: self.blocks.iter().map(|b| b.1).collect(), nvars: next }
    }

    /// Sparse text dump: one line `constraint block row col value` per nonzero.
    /// Constraint 0 is the objective. Block 0 holds the constant term, blocks
    /// `1..=B` are the PSD blocks and block `B+1` the scalars (row = col = index).
    pub fn dump_sparse(&self) -> String {
        let nb = self.blocks.len();
        let mut out = String::new();
        let mut emit = |cid: usize, e: &LinExpr| {
            if e.constant != 0.0 {
                let _ = writeln!(out, "{cid} 0 0 0 {:e}", e.constant);
            }
            for (v, c) in e.terms() {
                match v {
                    VarRef::Scalar(i) => {
                        let _ = writeln!(out, "{cid} {} {i} {i} {c:e}", nb + 1);
                    }
                    VarRef::Entry { block, row, col } => {
                        let _ = writeln!(out, "{cid} {} {row} {col} {c:e}", block + 1);
                    }
                }
            }
        };
        emit(0, &self.objective);
        for (k, eq) in self.equalities.iter().enumerate() {
            emit(k + 1, &eq.expr);
        }
        out
    }
}

struct Layout {
    offsets: Vec<usize>,
    dims: Vec<usize>,
    nvars: usize,
}

impl Layout {
    fn index(&self, v: VarRef) -> usize {
        match v {
            VarRef::Scalar(i) => i,
            VarRef::Entry { block, row, col } => self.offsets[block] + col * (col + 1) / 2 + row,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub eq_tol: f64,
    pub psd_tol: f64,
    /// Interior-point gap and feasibility tolerance.
    pub solver_tol: f64,
    pub max_iter: u32,
    pub maxdet_tol: f64,
    pub maxdet_max_iters: usize,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eq_tol: 1e-6,
            psd_tol: 1e-7,
            solver_tol: 1e-9,
            max_iter: 300,
            maxdet_tol: 1e-4,
            maxdet_max_iters: 30,
            verbose: false,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

impl SdpStatus {
    pub fn is_feasible(self) -> bool {
        matches!(self, SdpStatus::Optimal | SdpStatus::Feasible)
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub blocks: Vec<DMatrix<f64>>,
    pub scalars: Vec<f64>,
    pub objective_value: f64,
    /// Largest equality violation at the returned point.
    pub eq_residual: f64,
    /// Smallest eigenvalue over all blocks, each normalized by its max-abs entry.
    pub min_psd_eig: f64,
    pub solver_status: String,
    pub iterations: u32,
    pub solve_time: f64,
    /// Dual weight per equality group (only for infeasible outcomes),
    /// largest first.
    pub group_duals: Vec<(String, f64)>,
    block_names: Vec<String>,
    scalar_names: Vec<String>,
}

impl SdpSolution {
    pub fn block(&self, b: BlockId) -> &DMatrix<f64> {
        &self.blocks[b.0]
    }

    pub fn scalar(&self, s: ScalarId) -> f64 {
        self.scalars[s.0]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.block_names.iter().position(|n| n == name).map(|i| &self.blocks[i])
    }

    pub fn scalar_by_name(&self, name: &str) -> Option<f64> {
        self.scalar_names.iter().position(|n| n == name).map(|i| self.scalars[i])
    }

    pub fn var(&self, v: VarRef) -> f64 {
        match v {
            VarRef::Scalar(i) => self.scalars[i],
            VarRef::Entry { block, row, col } => self.blocks[block][(row, col)],
        }
    }

    pub fn value(&self, e: &LinExpr) -> f64 {
        e.constant + e.terms().map(|(v, c)| c * self.var(v)).sum::<f64>()
    }

    fn empty(problem: &SdpProblem, status: SdpStatus, solver_status: String) -> Self {
        SdpSolution {
            status,
            blocks: problem.blocks.iter().map(|(_, d)| DMatrix::zeros(*d, *d)).collect(),
            scalars: vec![0.0; problem.scalars.len()],
            objective_value: f64::NAN,
            eq_residual: f64::INFINITY,
            min_psd_eig: f64::NEG_INFINITY,
            solver_status,
            iterations: 0,
            solve_time: 0.0,
            group_duals: Vec::new(),
            block_names: problem.blocks.iter().map(|b| b.0.clone()).collect(),
            scalar_names: problem.scalars.iter().map(|s| s.0.clone()).collect(),
        }
    }
}

/// Smallest eigenvalue of `m / max|m_ij|`; 0 for the zero matrix.
pub fn normalized_min_eig(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * (0.5 / scale);
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn recheck(problem: &SdpProblem, sol: &mut SdpSolution) {
    let mut eq = 0.0f64;
    for e in &problem.equalities {
        eq = eq.max(sol.value(&e.expr).abs());
    }
    for (i, (_, lb)) in problem.scalars.iter().enumerate() {
        if let Some(lb) = lb {
            eq = eq.max(lb - sol.scalars[i]);
        }
    }
    let mut min_eig = f64::INFINITY;
    for b in &sol.blocks {
        min_eig = min_eig.min(normalized_min_eig(b));
    }
    if sol.blocks.is_empty() {
        min_eig = 0.0;
    }
    sol.eq_residual = eq;
    sol.min_psd_eig = min_eig;
}

fn passes(sol: &SdpSolution, cfg: &SolverConfig) -> bool {
    sol.eq_residual <= cfg.eq_tol && sol.min_psd_eig >= -cfg.psd_tol && sol.scalars.iter().all(|v| v.is_finite())
}

/// Solves the problem with its linear objective. A log-det marker, if any,
/// is ignored here; see [`solve_maxdet`].
pub fn solve(problem: &SdpProblem, cfg: &SolverConfig) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    solve_with_objective(problem, &problem.objective, cfg)
}

/// Interior-point tolerance of the first retry after a numerical failure.
const RETRY_TOL: f64 = 1e-7;

/// Solves, retrying after a numerical failure at a looser and then at a
/// tighter tolerance; the stall point depends on the iterate path.
fn solve_with_objective(problem: &SdpProblem, objective: &LinExpr, cfg: &SolverConfig) -> Result<SdpSolution, SdpError> {
    let mut sol = solve_once(problem, objective, cfg, cfg.solver_tol)?;
    let mut retries = Vec::new();
    if cfg.solver_tol < RETRY_TOL {
        retries.push(RETRY_TOL);
    }
    retries.push(cfg.solver_tol * 0.1);
    for tol in retries {
        if sol.status != SdpStatus::NumericalFailure {
            break;
        }
        let mut retry = solve_once(problem, objective, cfg, tol)?;
        log::debug!("sdp: retry at tolerance {tol:e} returned {:?}", retry.status);
        retry.iterations += sol.iterations;
        retry.solve_time += sol.solve_time;
        sol = retry;
    }
    Ok(sol)
}

fn solve_once(problem: &SdpProblem, objective: &LinExpr, cfg: &SolverConfig, tol: f64) -> Result<SdpSolution, SdpError> {
    let layout = problem.layout();
    let n = layout.nvars;

    let mut q = vec![0.0; n];
    for (v, c) in objective.terms() {
        q[layout.index(v)] += c;
    }

    let mut ri = Vec::new();
    let mut ci = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut row = 0usize;

    // Equalities: Σ a x + c = 0  ->  A x + s = -c with s in the zero cone.
    let n_eq = problem.equalities.len();
    for eq in &problem.equalities {
        for (v, c) in eq.expr.terms() {
            ri.push(row);
            ci.push(layout.index(v));
            vals.push(c);
        }
        b.push(-eq.expr.constant);
        row += 1;
    }
    // Lower bounds: x - lb >= 0  ->  -x + s = -lb.
    let mut n_lb = 0;
    for (i, (_, lb)) in problem.scalars.iter().enumerate() {
        if let Some(lb) = lb {
            ri.push(row);
            ci.push(i);
            vals.push(-1.0);
            b.push(-lb);
            row += 1;
            n_lb += 1;
        }
    }
    // PSD blocks: s = svec(X), upper triangle column-major with √2 off-diagonal.
    let sqrt2 = std::f64::consts::SQRT_2;
    for (k, &d) in layout.dims.iter().enumerate() {
        for col in 0..d {
            for r in 0..=col {
                ri.push(row);
                ci.push(layout.offsets[k] + col * (col + 1) / 2 + r);
                vals.push(if r == col { -1.0 } else { -sqrt2 });
                b.push(0.0);
                row += 1;
            }
        }
    }
    let m = row;
    let a = CscMatrix::new_from_triplets(m, n, ri, ci, vals);
    let p = CscMatrix::zeros((n, n));

    let mut cones = Vec::new();
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }
    if n_lb > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_lb));
    }
    for &d in &layout.dims {
        cones.push(SupportedConeT::PSDTriangleConeT(d));
    }

    let settings = DefaultSettings {
        verbose: cfg.verbose,
        max_iter: cfg.max_iter,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        tol_ktratio: 1e-7,
        reduced_tol_gap_abs: 1e-6,
        reduced_tol_gap_rel: 1e-6,
        reduced_tol_feas: 1e-7,
        ..DefaultSettings::default()
    };

    let start = Instant::now();
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).map_err(|e| SdpError::Setup(format!("{e:?}")))?;
    solver.solve();
    let elapsed = start.elapsed().as_secs_f64();
    let raw = &solver.solution;

    let mut sol = SdpSolution::empty(problem, SdpStatus::NumericalFailure, format!("{:?}", raw.status));
    sol.iterations = raw.iterations;
    sol.solve_time = elapsed;
    let x = &raw.x;
    for i in 0..problem.scalars.len() {
        sol.scalars[i] = x[i];
    }
    for (k, &d) in layout.dims.iter().enumerate() {
        let mut mtx = DMatrix::zeros(d, d);
        for col in 0..d {
            for r in 0..=col {
                let v = x[layout.offsets[k] + col * (col + 1) / 2 + r];
                mtx[(r, col)] = v;
                mtx[(col, r)] = v;
            }
        }
        sol.blocks[k] = mtx;
    }
    sol.objective_value = sol.value(objective);
    recheck(problem, &mut sol);

    sol.status = match raw.status {
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SdpStatus::Infeasible,
        SolverStatus::Solved if passes(&sol, cfg) => SdpStatus::Optimal,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SdpStatus::NumericalFailure,
        _ if passes(&sol, cfg) => SdpStatus::Feasible,
        _ => SdpStatus::NumericalFailure,
    };
    if sol.status == SdpStatus::Infeasible {
        let mut weights = vec![0.0; problem.groups.len()];
        for (k, eq) in problem.equalities.iter().enumerate() {
            weights[eq.group] += raw.z[k].abs();
        }
        let total: f64 = weights.iter().sum();
        let mut gd: Vec<(String, f64)> = problem
            .groups
            .iter()
            .cloned()
            .zip(weights.into_iter().map(|w| if total > 0.0 { w / total } else { 0.0 }))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        gd.sort_by(|a, b| b.1.total_cmp(&a.1));
        sol.group_duals = gd;
    }
    log::debug!(
        "sdp: {} vars, {} eqs, status {:?} ({}), eq_res {:.2e}, min_eig {:.2e}, {:.3}s",
        n,
        n_eq,
        sol.status,
        sol.solver_status,
        sol.eq_residual,
        sol.min_psd_eig,
        elapsed
    );
    Ok(sol)
}

fn logdet(m: &DMatrix<f64>) -> Option<f64> {
    m.clone().cholesky().map(|c| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn combine(a: &SdpSolution, b: &SdpSolution, t: f64) -> SdpSolution {
    let mut out = a.clone();
    for (k, blk) in out.blocks.iter_mut().enumerate() {
        *blk = &a.blocks[k] * (1.0 - t) + &b.blocks[k] * t;
    }
    for (k, s) in out.scalars.iter_mut().enumerate() {
        *s = (1.0 - t) * a.scalars[k] + t * b.scalars[k];
    }
    out
}

/// Step length in `[0, 1]` maximizing `log det((1-t) X + t X̂)`.
fn line_search(x: &DMatrix<f64>, xhat: &DMatrix<f64>) -> f64 {
    let Some(chol) = x.clone().cholesky() else { return 0.0 };
    let l = chol.l();
    let linv = l.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(x.nrows(), x.ncols()));
    let d = &linv * (xhat - x) * linv.transpose();
    let mu = SymmetricEigen::new((&d + d.transpose()) * 0.5).eigenvalues;
    let dphi = |t: f64| -> f64 {
        let mut s = 0.0;
        for &m in mu.iter() {
            let den = 1.0 + t * m;
            if den <= 1e-14 {
                return f64::NEG_INFINITY;
            }
            s += m / den;
        }
        s
    };
    if dphi(0.0) <= 0.0 {
        return 0.0;
    }
    if dphi(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if dphi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
/// Adds `t ≤ (det X)^{1/d}` for block `xb` using only PSD blocks and returns `t`.
///
/// `[[X, L], [Lᵀ, diag(L)]] ⪰ 0` with `L` lower triangular gives
/// `det X ≥ Π Lᵢᵢ`, and a binary tree of 2×2 blocks `[[a, s], [s, b]] ⪰ 0`
/// (`s ≤ √(ab)`) bounds the geometric mean of the `Lᵢᵢ` from below by `t`.
fn add_det_root(p: &mut SdpProblem, xb: BlockId) -> ScalarId {
    let d = p.block_dim(xb);
    p.set_group("__det_root");
    let g = p.add_block("__det_root_lift", 2 * d);
    for i in 0..d {
        for j in i..d {
            let mut e = LinExpr::var(VarRef::entry(g, i, j));
            e.add_term(VarRef::entry(xb, i, j), -1.0);
            p.add_equality(e);
        }
    }
    for i in 0..d {
        for j in 0..d {
            if j > i {
                p.add_equality(LinExpr::var(VarRef::entry(g, i, d + j)));
            }
        }
        for j in (i + 1)..d {
            p.add_equality(LinExpr::var(VarRef::entry(g, d + i, d + j)));
        }
        let mut e = LinExpr::var(VarRef::entry(g, d + i, d + i));
        e.add_term(VarRef::entry(g, i, d + i), -1.0);
        p.add_equality(e);
    }
    let t = p.add_scalar("__det_root", None);
    let mut level: Vec<LinExpr> = (0..d).map(|i| LinExpr::var(VarRef::entry(g, i, d + i))).collect();
    let width = d.next_power_of_two().max(2);
    while level.len() < width {
        level.push(LinExpr::var(VarRef::scalar(t)));
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            let s = p.add_scalar("__geo_mean", None);
            let sv = LinExpr::var(VarRef::scalar(s));
            p.add_lmi("__geo_mean", &[vec![pair[0].clone(), sv.clone()], vec![sv.clone(), pair[1].clone()]]);
            next.push(sv);
        }
        level = next;
    }
    let mut e = level.pop().unwrap();
    e.add_term(VarRef::scalar(t), -1.0);
    p.add_equality(e);
    t
}

fn trim_to(sol: &mut SdpSolution, problem: &SdpProblem) {
    sol.blocks.truncate(problem.blocks.len());
    sol.scalars.truncate(problem.scalars.len());
    sol.block_names.truncate(problem.blocks.len());
    sol.scalar_names.truncate(problem.scalars.len());
    sol.group_duals.clear();
}

/// Maximizes `log det X` over the feasible set, `X` being the block named by
/// the problem's log-det marker.
///
/// The starting point maximizes `(det X)^{1/d}`, which is expressible as a
/// linear SDP and shares the maximizer of `log det`. It is then refined by
/// linearization: each step solves `max trace(X_k⁻¹ X)` and moves every
/// variable towards that solution with the step length maximizing `log det`,
/// so iterates stay feasible and `log det` never decreases. The loop stops
/// once the gain drops below `maxdet_tol`; at a stationary point the first
/// linearized step already returns a zero step.
pub fn solve_maxdet(problem: &SdpProblem, cfg: &SolverConfig) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let Some(xb) = problem.logdet else {
        return Err(SdpError::Malformed("no log-det block declared".into()));
    };
    let d = problem.block_dim(xb);
    let start = Instant::now();

    let mut lifted = problem.clone();
    let t = add_det_root(&mut lifted, xb);
    let mut cur = solve_with_objective(&lifted, &LinExpr::var(VarRef::scalar(t)).scaled(-1.0), cfg)?;
    trim_to(&mut cur, problem);
    if cur.status == SdpStatus::NumericalFailure {
        let mut trace = LinExpr::zero();
        for i in 0..d {
            trace.add_term(VarRef::entry(xb, i, i), -1.0);
        }
        let alt = solve_with_objective(problem, &trace, cfg)?;
        log::debug!("maxdet: det-root start failed ({}); trace start {:?}", cur.solver_status, alt.status);
        if alt.status.is_feasible() {
            cur = alt;
        }
    }
    if !cur.status.is_feasible() {
        if cur.status == SdpStatus::Infeasible {
            let infeasible = solve_with_objective(problem, &LinExpr::zero(), cfg)?;
            return Ok(infeasible);
        }
        return Ok(cur);
    }
    let Some(mut ld) = logdet(cur.block(xb)) else {
        cur.status = SdpStatus::NumericalFailure;
        cur.solver_status = "log-det block is singular at the optimum".into();
        return Ok(cur);
    };

    let mut converged = false;
    let mut iterations = cur.iterations;
    for it in 0..cfg.maxdet_max_iters {
        let xk = cur.block(xb).clone();
        let Some(xinv) = xk.clone().try_inverse() else { break };
        let mut lin = LinExpr::zero();
        for i in 0..d {
            for j in i..d {
                let w = if i == j { xinv[(i, i)] } else { xinv[(i, j)] + xinv[(j, i)] };
                lin.add_term(VarRef::entry(xb, i, j), -w);
            }
        }
        let scale = lin.max_abs_coeff();
        let hat = solve_with_objective(problem, &lin.scaled(1.0 / scale), cfg)?;
        iterations += hat.iterations;
        if !hat.status.is_feasible() {
            log::debug!("maxdet: linearized step {it} returned {:?}; keeping current point", hat.status);
            break;
        }
        let step = line_search(&xk, hat.block(xb));
        let next = combine(&cur, &hat, step);
        let Some(ld_next) = logdet(next.block(xb)) else { break };
        if ld_next < ld - 1e-12 * (1.0 + ld.abs()) {
            cur.status = SdpStatus::NumericalFailure;
            cur.solver_status = format!("log det decreased at iteration {it}: {ld} -> {ld_next}");
            return Ok(cur);
        }
        let delta = ld_next - ld;
        if step > 0.0 {
            cur = next;
            ld = ld_next;
        }
        log::debug!("maxdet iteration {it}: step {step:.4}, log det {ld:.6}");
        if delta.abs() <= cfg.maxdet_tol {
            converged = true;
            break;
        }
    }
    recheck(problem, &mut cur);
    cur.objective_value = -ld;
    cur.iterations = iterations;
    cur.solve_time = start.elapsed().as_secs_f64();
    cur.status = if !passes(&cur, cfg) {
        SdpStatus::NumericalFailure
    } else if converged {
        SdpStatus::Optimal
    } else {
        SdpStatus::Feasible
    };
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_eigenvalue_condition() {
        // minimize t s.t. [[t, 1], [1, t]] ⪰ 0
        let mut p = SdpProblem::new();
        let t = p.add_scalar("t", None);
        let tv = LinExpr::var(VarRef::scalar(t));
        p.add_lmi("m", &[vec![tv.clone(), LinExpr::constant(1.0)], vec![LinExpr::constant(1.0), tv.clone()]]);
        p.set_objective(tv);
        let s = solve(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.scalar(t) - 1.0).abs() < 1e-6);
        let eig = SymmetricEigen::new(s.block(BlockId(0)).clone()).eigenvalues.min();
        assert!(eig.abs() < 1e-6);
    }

    #[test]
    fn forced_scalar() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("x", None);
        let mut e = LinExpr::var(VarRef::scalar(x));
        e.constant = -3.0;
        p.add_equality(e);
        p.set_objective(LinExpr::var(VarRef::scalar(x)));
        let s = solve(&p, &SolverConfig::default()).unwrap();
        assert!(s.status.is_feasible());
        assert!((s.scalar(x) - 3.0).abs() < 1e-7);
    }

    #[test]
    fn infeasible_is_reported() {
        // X ⪰ 0 with X_00 = -1
        let mut p = SdpProblem::new();
        let b = p.add_block("x", 2);
        p.set_group("negative diagonal");
        let mut e = LinExpr::var(VarRef::entry(b, 0, 0));
        e.constant = 1.0;
        p.add_equality(e);
        let s = solve(&p, &SolverConfig::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
        assert_eq!(s.group_duals[0].0, "negative diagonal");
    }

    #[test]
    fn maxdet_bounded_by_identity() {
        // maximize log det X s.t. I - X ⪰ 0
        let mut p = SdpProblem::new();
        let x = p.add_block("x", 2);
        let rows: Vec<Vec<LinExpr>> = (0..2)
            .map(|i| {
                (0..2)
                    .map(|j| {
                        let mut e = LinExpr::var(VarRef::entry(x, i, j)).scaled(-1.0);
                        if i == j {
                            e.constant = 1.0;
                        }
                        e
                    })
                    .collect()
            })
            .collect();
        p.add_lmi("slack", &rows);
        p.set_logdet_objective(x);
        let s = solve_maxdet(&p, &SolverConfig::default()).unwrap();
        assert!(s.status.is_feasible());
        assert!((s.block(x) - DMatrix::<f64>::identity(2, 2)).amax() < 1e-3);
        assert!(s.objective_value.abs() < 1e-3);
    }

    #[test]
    fn maxdet_am_gm() {
        // maximize log det diag(a, b) s.t. a + b = 2, off-diagonal fixed at 0
        let mut p = SdpProblem::new();
        let x = p.add_block("x", 2);
        let mut e = LinExpr::var(VarRef::entry(x, 0, 0));
        e.add_term(VarRef::entry(x, 1, 1), 1.0);
        e.constant = -2.0;
        p.add_equality(e);
        p.add_equality(LinExpr::var(VarRef::entry(x, 0, 1)));
        p.set_logdet_objective(x);
        let s = solve_maxdet(&p, &SolverConfig::default()).unwrap();
        assert!(s.status.is_feasible());
        assert!((s.block(x)[(0, 0)] - 1.0).abs() < 1e-2);
        assert!((s.block(x)[(1, 1)] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn line_search_never_decreases() {
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let xhat = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 3.0]);
        let t = line_search(&x, &xhat);
        let before = logdet(&x).unwrap();
        let after = logdet(&(&x * (1.0 - t) + &xhat * t)).unwrap();
        assert!(after >= before);
        // brute-force check of the maximizer on a grid
        let mut best = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let s = k as f64 / 1000.0;
            if let Some(v) = logdet(&(&x * (1.0 - s) + &xhat * s)) {
                best = best.max(v);
            }
        }
        assert!(after >= best - 1e-6);
    }

    #[test]
    fn dump_lists_every_nonzero() {
        let mut p = SdpProblem::new();
        let x = p.add_scalar("x", None);
        let b = p.add_block("b", 2);
        let mut e = LinExpr::var(VarRef::scalar(x));
        e.add_term(VarRef::entry(b, 1, 0), 2.0);
        e.constant = -1.0;
        p.add_equality(e);
        let dump = p.dump_sparse();
        assert_eq!(dump.lines().count(), 3);
        assert!(dump.contains("1 1 0 1 2e0"));
        assert!(dump.contains("1 2 0 0 1e0"));
    }
}
