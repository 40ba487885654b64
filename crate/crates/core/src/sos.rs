//! Sum-of-squares constraints compiled to Gram-matrix SDP fragments.
//!
//! A target polynomial whose coefficients are affine in SDP variables is
//! SOS iff `p = bᵀ Q b` for a monomial basis `b` and some `Q ⪰ 0`. Compiling
//! a constraint adds the PSD block `Q` and one equality per monomial.
//! Matrix constraints `S(x) ⪰ 0` are scalarized to `yᵀ S(x) y` with a basis
//! linear in the auxiliary variables `y`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{monomials_up_to, Monomial, PolyError, PolyMatrix, Polynomial};
use crate::sdp::{BlockId, LinExpr, ScalarId, SdpProblem, SdpSolution, VarRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("an odd-degree polynomial (degree {0}) cannot be SOS")]
    OddDegree(u32),
    #[error("constraint {constraint}: monomial {monomial} has a fixed nonzero coefficient but no basis product reaches it")]
    Unrepresentable { constraint: String, monomial: String },
    #[error("constraint {0}: matrix target is not square or not symmetric")]
    NotSymmetric(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Polynomial whose coefficients are affine expressions in SDP variables.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePoly {
    nvars: usize,
    terms: BTreeMap<Monomial, LinExpr>,
}

impl AffinePoly {
    pub fn zero(nvars: usize) -> Self {
        AffinePoly { nvars, terms: BTreeMap::new() }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = AffinePoly::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &LinExpr::constant(c));
        }
        out
    }

    /// `Σ_k θ_k m_k` with one fresh free scalar `θ_k` per monomial.
    pub fn decision(problem: &mut SdpProblem, name: &str, nvars: usize, monomials: &[Monomial]) -> (Self, Vec<ScalarId>) {
        Self::decision_bounded(problem, name, nvars, monomials, None)
    }

    pub fn decision_bounded(
        problem: &mut SdpProblem,
        name: &str,
        nvars: usize,
        monomials: &[Monomial],
        lower: Option<f64>,
    ) -> (Self, Vec<ScalarId>) {
        let mut out = AffinePoly::zero(nvars);
        let mut ids = Vec::with_capacity(monomials.len());
        for m in monomials {
            let s = problem.add_scalar(&format!("{name}[{}]", m.format_with(&[])), lower);
            out.add_term(m.clone(), &LinExpr::var(VarRef::scalar(s)));
            ids.push(s);
        }
        (out, ids)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn add_term(&mut self, m: Monomial, e: &LinExpr) {
        debug_assert_eq!(m.nvars(), self.nvars);
        let slot = self.terms.entry(m.clone()).or_default();
        slot.add_scaled(e, 1.0);
        if slot.is_constant() && slot.constant == 0.0 {
            self.terms.remove(&m);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &LinExpr)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> LinExpr {
        self.terms.get(m).cloned().unwrap_or_default()
    }

    /// Monomials whose coefficient is not identically zero.
    pub fn support(&self) -> Vec<Monomial> {
        self.terms.keys().cloned().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn plus(&self, other: &AffinePoly) -> AffinePoly {
        assert_eq!(self.nvars, other.nvars, "affine polynomial variable count");
        let mut out = self.clone();
        for (m, e) in other.terms() {
            out.add_term(m.clone(), e);
        }
        out
    }

    pub fn minus(&self, other: &AffinePoly) -> AffinePoly {
        self.plus(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> AffinePoly {
        let mut out = AffinePoly::zero(self.nvars);
        if s != 0.0 {
            for (m, e) in self.terms() {
                out.add_term(m.clone(), &e.scaled(s));
            }
        }
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> AffinePoly {
        assert_eq!(self.nvars, p.nvars(), "affine polynomial variable count");
        let mut out = AffinePoly::zero(self.nvars);
        for (m, e) in self.terms() {
            for (pm, c) in p.terms() {
                out.add_term(m.mul(pm), &e.scaled(c));
            }
        }
        out
    }

    pub fn derivative(&self, i: usize) -> AffinePoly {
        let mut out = AffinePoly::zero(self.nvars);
        for (m, e) in self.terms() {
            if let Some((k, dm)) = m.derivative(i) {
                out.add_term(dm, &e.scaled(k));
            }
        }
        out
    }

    pub fn remap(&self, nvars: usize, map: &[usize]) -> AffinePoly {
        let mut out = AffinePoly::zero(nvars);
        for (m, e) in self.terms() {
            out.add_term(m.remap(nvars, map), e);
        }
        out
    }

    /// Substitutes `x_i = value`, keeping the variable count.
    pub fn set_variable(&self, i: usize, value: f64) -> AffinePoly {
        let mut out = AffinePoly::zero(self.nvars);
        for (m, e) in self.terms() {
            let k = m.exponents()[i];
            let mut ex = m.exponents().to_vec();
            ex[i] = 0;
            let f = if k == 0 { 1.0 } else { value.powi(k as i32) };
            out.add_term(Monomial::new(ex), &e.scaled(f));
        }
        out
    }

    pub fn instantiate(&self, sol: &SdpSolution) -> Polynomial {
        let mut p = Polynomial::zero(self.nvars);
        for (m, e) in self.terms() {
            p.add_term(m.clone(), sol.value(e));
        }
        p
    }

    /// The polynomial of constant parts; `None` if any coefficient still
    /// depends on a decision variable.
    pub fn to_polynomial(&self) -> Option<Polynomial> {
        let mut p = Polynomial::zero(self.nvars);
        for (m, e) in self.terms() {
            if !e.is_constant() {
                return None;
            }
            p.add_term(m.clone(), e.constant);
        }
        Some(p)
    }

    /// Value at a point as an affine expression.
    pub fn eval(&self, point: &[f64]) -> LinExpr {
        let mut out = LinExpr::zero();
        for (m, e) in self.terms() {
            out.add_scaled(e, m.eval(point));
        }
        out
    }
}

/// Matrix of affine polynomials, stored densely row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<AffinePoly>,
}

impl AffinePolyMatrix {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        AffinePolyMatrix { rows, cols, nvars, entries: vec![AffinePoly::zero(nvars); rows * cols] }
    }

    pub fn from_poly_matrix(m: &PolyMatrix) -> Self {
        let mut out = Self::zeros(m.rows(), m.cols(), m.nvars());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(i, j, AffinePoly::from_poly(m.get(i, j)));
            }
        }
        out
    }

    pub fn from_constant(m: &DMatrix<f64>, nvars: usize) -> Self {
        Self::from_poly_matrix(&PolyMatrix::from_constant(m, nvars))
    }

    pub fn column(v: Vec<AffinePoly>, nvars: usize) -> Self {
        let rows = v.len();
        AffinePolyMatrix { rows, cols: 1, nvars, entries: v }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn get(&self, i: usize, j: usize) -> &AffinePoly {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: AffinePoly) {
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    pub fn plus(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "affine matrix shapes");
        AffinePolyMatrix {
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a.plus(b)).collect(),
            ..*self
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        AffinePolyMatrix { entries: self.entries.iter().map(|a| a.scale(s)).collect(), ..*self }
    }

    /// `self · m` for a known polynomial matrix `m`.
    pub fn mul_right(&self, m: &PolyMatrix) -> Self {
        assert_eq!(self.cols, m.rows(), "affine matrix product shapes");
        let mut out = Self::zeros(self.rows, m.cols(), self.nvars);
        for i in 0..self.rows {
            for j in 0..m.cols() {
                let mut acc = AffinePoly::zero(self.nvars);
                for k in 0..self.cols {
                    if !m.get(k, j).is_zero() && !self.get(i, k).is_zero() {
                        acc = acc.plus(&self.get(i, k).mul_poly(m.get(k, j)));
                    }
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `m · self` for a known polynomial matrix `m`.
    pub fn mul_left(&self, m: &PolyMatrix) -> Self {
        self.transpose().mul_right(&m.transpose()).transpose()
    }

    /// Assembles a block matrix; every block in a block row shares its row
    /// count and every block in a block column shares its column count.
    pub fn from_blocks(blocks: &[Vec<AffinePolyMatrix>]) -> Self {
        let row_sizes: Vec<usize> = blocks.iter().map(|r| r[0].rows).collect();
        let col_sizes: Vec<usize> = blocks[0].iter().map(|b| b.cols).collect();
        let nvars = blocks[0][0].nvars;
        let mut out = Self::zeros(row_sizes.iter().sum(), col_sizes.iter().sum(), nvars);
        let mut r0 = 0;
        for (bi, brow) in blocks.iter().enumerate() {
            let mut c0 = 0;
            for (bj, blk) in brow.iter().enumerate() {
                assert_eq!((blk.rows, blk.cols), (row_sizes[bi], col_sizes[bj]), "block ({bi},{bj}) shape");
                for i in 0..blk.rows {
                    for j in 0..blk.cols {
                        out.set(r0 + i, c0 + j, blk.get(i, j).clone());
                    }
                }
                c0 += col_sizes[bj];
            }
            r0 += row_sizes[bi];
        }
        out
    }

    pub fn instantiate(&self, sol: &SdpSolution) -> PolyMatrix {
        let mut out = PolyMatrix::zeros(self.rows, self.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, self.get(i, j).instantiate(sol));
            }
        }
        out
    }

    /// Fixed-coefficient counterpart; `None` if any entry has unknowns.
    pub fn to_poly_matrix(&self) -> Option<PolyMatrix> {
        let mut out = PolyMatrix::zeros(self.rows, self.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, self.get(i, j).to_polynomial()?);
            }
        }
        Some(out)
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self.get(i, j).minus(self.get(j, i));
                if d.terms().any(|(_, e)| e.max_abs_coeff() > 1e-12) {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SosTarget {
    Scalar(AffinePoly),
    Matrix(AffinePolyMatrix),
}

/// Requirement that a polynomial (matrix) be SOS. When `basis` is `None`
/// the Gram basis is derived from the target support.
#[derive(Clone, Debug)]
pub struct SosConstraint {
    pub name: String,
    pub target: SosTarget,
    pub basis: Option<Vec<Monomial>>,
}

impl SosConstraint {
    pub fn scalar(name: &str, p: AffinePoly) -> Self {
        SosConstraint { name: name.to_string(), target: SosTarget::Scalar(p), basis: None }
    }

    pub fn matrix(name: &str, m: AffinePolyMatrix) -> Self {
        SosConstraint { name: name.to_string(), target: SosTarget::Matrix(m), basis: None }
    }
}

/// Result of compiling one constraint into a problem.
#[derive(Clone, Debug)]
pub struct CompiledSos {
    pub name: String,
    pub block: Option<BlockId>,
    /// Gram basis over the scalarized variables (original variables, then `y`).
    pub basis: Vec<Monomial>,
    pub target: SosTarget,
    /// Matrix size for scalarized constraints.
    pub matrix_dim: Option<usize>,
}

impl CompiledSos {
    /// Sum of the Gram diagonal, for regularizing objectives.
    pub fn gram_trace(&self) -> LinExpr {
        let mut e = LinExpr::zero();
        if let Some(b) = self.block {
            for i in 0..self.basis.len() {
                e.add_term(VarRef::entry(b, i, i), 1.0);
            }
        }
        e
    }

    pub fn certificate(&self, sol: &SdpSolution) -> SosCertificate {
        let gram = match self.block {
            Some(b) => sol.block(b).clone(),
            None => DMatrix::zeros(0, 0),
        };
        let target = self.target_instance(sol);
        let mut cert = SosCertificate { gram, basis: self.basis.clone(), residual: 0.0 };
        cert.residual = gram_residual(&target.scalarized(), &cert);
        cert
    }

    pub fn target_instance(&self, sol: &SdpSolution) -> TargetInstance {
        match &self.target {
            SosTarget::Scalar(p) => TargetInstance::Scalar(p.instantiate(sol)),
            SosTarget::Matrix(m) => TargetInstance::Matrix(m.instantiate(sol)),
        }
    }
}

/// A target with all unknowns fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TargetInstance {
    Scalar(Polynomial),
    Matrix(PolyMatrix),
}

impl TargetInstance {
    /// The scalar polynomial whose SOS-ness is certified (`yᵀ S y` for matrices).
    pub fn scalarized(&self) -> Polynomial {
        match self {
            TargetInstance::Scalar(p) => p.clone(),
            TargetInstance::Matrix(m) => scalarize(m),
        }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        match self {
            TargetInstance::Scalar(p) => p.max_abs_coeff(),
            TargetInstance::Matrix(m) => m.entries().iter().fold(0.0, |a, p| a.max(p.max_abs_coeff())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosCertificate {
    pub gram: DMatrix<f64>,
    pub basis: Vec<Monomial>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosReport {
    pub residual: f64,
    pub min_eig: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BasisStructure {
    Full,
    /// For targets without a constant term whose degrees are all even.
    EvenOnly,
}

/// Candidate Gram basis for a target of degree `target_degree`.
pub fn gram_basis_for(target_degree: u32, nvars: usize, structure: BasisStructure) -> Result<Vec<Monomial>, SosError> {
    if target_degree % 2 == 1 {
        return Err(SosError::OddDegree(target_degree));
    }
    let min = match structure {
        BasisStructure::Full => 0,
        BasisStructure::EvenOnly => 1.min(target_degree / 2),
    };
    Ok(monomials_up_to(nvars, min, target_degree / 2))
}

/// Basis monomials `b` with `2b` inside the degree and per-variable exponent
/// ranges of `support`; any basis element outside those ranges would need a
/// zero Gram row.
pub fn basis_from_support(support: &[Monomial], nvars: usize) -> Vec<Monomial> {
    if support.is_empty() {
        return Vec::new();
    }
    let lo_deg = support.iter().map(Monomial::degree).min().unwrap();
    let hi_deg = support.iter().map(Monomial::degree).max().unwrap();
    let mut lo = vec![u32::MAX; nvars];
    let mut hi = vec![0u32; nvars];
    for m in support {
        for (v, &e) in m.exponents().iter().enumerate() {
            lo[v] = lo[v].min(e);
            hi[v] = hi[v].max(e);
        }
    }
    monomials_up_to(nvars, lo_deg.div_ceil(2), hi_deg / 2)
        .into_iter()
        .filter(|m| {
            m.exponents()
                .iter()
                .enumerate()
                .all(|(v, &e)| 2 * e <= hi[v] && 2 * e >= lo[v])
        })
        .collect()
}

/// `yᵀ S(x) y` over `nvars + rows` variables.
pub fn scalarize(s: &PolyMatrix) -> Polynomial {
    let n = s.nvars();
    let r = s.rows();
    let total = n + r;
    let map: Vec<usize> = (0..n).collect();
    let mut out = Polynomial::zero(total);
    for i in 0..r {
        for j in 0..r {
            let mut ym = vec![0; total];
            ym[n + i] += 1;
            ym[n + j] += 1;
            let y = Monomial::new(ym);
            for (m, c) in s.get(i, j).terms() {
                out.add_term(m.remap(total, &map).mul(&y), c);
            }
        }
    }
    out
}

fn scalarize_affine(s: &AffinePolyMatrix) -> AffinePoly {
    let n = s.nvars();
    let r = s.rows();
    let total = n + r;
    let map: Vec<usize> = (0..n).collect();
    let mut out = AffinePoly::zero(total);
    for i in 0..r {
        for j in 0..r {
            let mut ym = vec![0; total];
            ym[n + i] += 1;
            ym[n + j] += 1;
            let y = Monomial::new(ym);
            for (m, e) in s.get(i, j).terms() {
                out.add_term(m.remap(total, &map).mul(&y), e);
            }
        }
    }
    out
}

/// Products `b_i b_j` (i ≤ j) grouped by monomial, with multiplicity weights.
fn gram_products(basis: &[Monomial]) -> BTreeMap<Monomial, Vec<(usize, usize, f64)>> {
    let mut out: BTreeMap<Monomial, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for i in 0..basis.len() {
        for j in i..basis.len() {
            let w = if i == j { 1.0 } else { 2.0 };
            out.entry(basis[i].mul(&basis[j])).or_default().push((i, j, w));
        }
    }
    out
}

/// Drops basis elements `b` whose square has a fixed zero coefficient and is
/// produced by no other basis pair: such a `b` forces a zero Gram diagonal
/// and hence a zero Gram row. Repeats until stable.
fn prune_diagonal(mut basis: Vec<Monomial>, target: &AffinePoly) -> Vec<Monomial> {
    loop {
        let products = gram_products(&basis);
        let keep: Vec<bool> = basis
            .iter()
            .map(|b| {
                let sq = b.mul(b);
                let c = target.coeff(&sq);
                let fixed_zero = c.is_constant() && c.constant == 0.0;
                let others = products[&sq].iter().any(|&(i, j, _)| i != j);
                !fixed_zero || others
            })
            .collect();
        if keep.iter().all(|k| *k) {
            return basis;
        }
        basis = basis.into_iter().zip(keep).filter_map(|(b, k)| k.then_some(b)).collect();
    }
}

/// Adds the Gram block and coefficient-matching equalities for `c`.
pub fn compile(problem: &mut SdpProblem, c: &SosConstraint) -> Result<CompiledSos, SosError> {
    let (target, basis, matrix_dim) = match &c.target {
        SosTarget::Scalar(p) => {
            let basis = match &c.basis {
                Some(b) => b.clone(),
                None => basis_from_support(&p.support(), p.nvars()),
            };
            (p.clone(), basis, None)
        }
        SosTarget::Matrix(m) => {
            if !m.is_symmetric() {
                return Err(SosError::NotSymmetric(c.name.clone()));
            }
            let n = m.nvars();
            let r = m.rows();
            let basis = match &c.basis {
                Some(b) => b.clone(),
                None => {
                    let total = n + r;
                    let map: Vec<usize> = (0..n).collect();
                    let mut basis = Vec::new();
                    for i in 0..r {
                        let row = basis_from_support(&m.get(i, i).support(), n);
                        let mut ym = vec![0; total];
                        ym[n + i] = 1;
                        let y = Monomial::new(ym);
                        basis.extend(row.into_iter().map(|b| b.remap(total, &map).mul(&y)));
                    }
                    basis
                }
            };
            (scalarize_affine(m), basis, Some(r))
        }
    };

    let basis = prune_diagonal(basis, &target);
    problem.set_group(&c.name);
    let block = if basis.is_empty() { None } else { Some(problem.add_block(&format!("gram:{}", c.name), basis.len())) };
    let products = gram_products(&basis);
    let mut monos: BTreeSet<Monomial> = products.keys().cloned().collect();
    monos.extend(target.support());
    for m in monos {
        let coeff = target.coeff(&m);
        let mut e = coeff.scaled(-1.0);
        match products.get(&m) {
            Some(pairs) => {
                let b = block.expect("products imply a block");
                for &(i, j, w) in pairs {
                    e.add_term(VarRef::entry(b, i, j), w);
                }
            }
            None => {
                if coeff.is_constant() {
                    return Err(SosError::Unrepresentable {
                        constraint: c.name.clone(),
                        monomial: m.format_with(&[]),
                    });
                }
            }
        }
        problem.add_equality(e);
    }
    Ok(CompiledSos { name: c.name.clone(), block, basis, target: c.target.clone(), matrix_dim })
}

/// Max-abs coefficient of `target − bᵀ Q b`.
pub fn gram_residual(target: &Polynomial, cert: &SosCertificate) -> f64 {
    let nv = target.nvars();
    let mut diff = target.clone();
    for i in 0..cert.basis.len() {
        for j in 0..cert.basis.len() {
            let q = cert.gram[(i, j)];
            if q != 0.0 {
                diff.add_term(cert.basis[i].mul(&cert.basis[j]), -q);
            }
        }
    }
    if cert.basis.first().is_some_and(|b| b.nvars() != nv) {
        return f64::INFINITY;
    }
    diff.max_abs_coeff()
}

/// Independent re-expansion of a certificate against a fixed target.
/// Passes iff the coefficient residual is at most `1e-6·(1 + max|coeff|)`
/// and the Gram matrix, normalized by its max-abs entry, has no eigenvalue
/// below `−1e-7`.
pub fn verify_certificate(target: &TargetInstance, cert: &SosCertificate) -> SosReport {
    let scalar = target.scalarized();
    let residual = gram_residual(&scalar, cert);
    let min_eig = if cert.gram.nrows() == 0 {
        0.0
    } else {
        let scale = cert.gram.amax();
        if scale == 0.0 {
            0.0
        } else {
            let sym = (&cert.gram + cert.gram.transpose()) * (0.5 / scale);
            SymmetricEigen::new(sym).eigenvalues.min()
        }
    };
    let tolerance = 1e-6 * (1.0 + target.max_abs_coeff());
    SosReport { residual, min_eig, tolerance, pass: residual <= tolerance && min_eig >= -1e-7 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{solve, SdpStatus, SolverConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x1(n: usize, i: usize) -> Polynomial {
        Polynomial::var(n, i)
    }

    fn solve_scalar(p: &Polynomial) -> Result<(SdpSolution, CompiledSos), SosError> {
        let mut prob = SdpProblem::new();
        let c = compile(&mut prob, &SosConstraint::scalar("p", AffinePoly::from_poly(p)))?;
        let s = solve(&prob, &SolverConfig::default()).unwrap();
        Ok((s, c))
    }

    #[test]
    fn basis_enumeration() {
        let b = gram_basis_for(2, 1, BasisStructure::Full).unwrap();
        assert_eq!(b, vec![Monomial::new(vec![0]), Monomial::new(vec![1])]);
        assert_eq!(gram_basis_for(4, 2, BasisStructure::Full).unwrap().len(), 6);
        let even = gram_basis_for(4, 2, BasisStructure::EvenOnly).unwrap();
        assert_eq!(even.len(), 5);
        assert!(!even.contains(&Monomial::one(2)));
        // parity oracle: no kept element squares to an odd or zero degree
        assert!(even.iter().all(|m| m.degree() >= 1));
        assert!(matches!(gram_basis_for(3, 2, BasisStructure::Full), Err(SosError::OddDegree(3))));
    }

    #[test]
    fn square_has_unit_gram() {
        let (s, c) = solve_scalar(&x1(1, 0).pow(2)).unwrap();
        assert!(s.status.is_feasible());
        assert_eq!(c.basis, vec![Monomial::new(vec![1])]);
        assert!((s.block(c.block.unwrap())[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn perfect_square_gram() {
        // (x - 1)^2 on {1, x}: the Gram matrix is fully determined
        let x = x1(1, 0);
        let p = &(&x.pow(2) - &x.scale(2.0)) + &Polynomial::constant(1, 1.0);
        let (s, c) = solve_scalar(&p).unwrap();
        assert!(s.status.is_feasible());
        let g = s.block(c.block.unwrap());
        let hand = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((g - &hand).amax() < 1e-6);
        let cert = c.certificate(&s);
        let rep = verify_certificate(&TargetInstance::Scalar(p.clone()), &cert);
        assert!(rep.pass);
        assert!(rep.min_eig.abs() < 1e-6);
    }

    #[test]
    fn negative_square_is_not_sos() {
        let p = x1(1, 0).pow(2).scale(-1.0);
        let (s, _) = solve_scalar(&p).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
    }

    #[test]
    fn quartic_plus_one_by_brute_force_gram() {
        // x^4 + 1 on {1, x, x^2}: Q = [[1,0,a],[0,-2a,0],[a,0,1]] is PSD for a in [-1, 0]
        let x = x1(1, 0);
        let p = &x.pow(4) + &Polynomial::constant(1, 1.0);
        let mut found = false;
        for k in 0..=100 {
            let a = -(k as f64) / 100.0;
            let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, a, 0.0, -2.0 * a, 0.0, a, 0.0, 1.0]);
            if SymmetricEigen::new(q).eigenvalues.min() >= -1e-12 {
                found = true;
            }
        }
        assert!(found);
        let (s, c) = solve_scalar(&p).unwrap();
        assert!(s.status.is_feasible());
        assert!(verify_certificate(&TargetInstance::Scalar(p), &c.certificate(&s)).pass);
    }

    #[test]
    fn perturbed_gram_fails_verification() {
        let x = x1(1, 0);
        let p = &(&x.pow(2) - &x.scale(2.0)) + &Polynomial::constant(1, 1.0);
        let basis = vec![Monomial::new(vec![0]), Monomial::new(vec![1])];
        let mut gram = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let t = TargetInstance::Scalar(p);
        let exact = verify_certificate(&t, &SosCertificate { gram: gram.clone(), basis: basis.clone(), residual: 0.0 });
        assert_eq!(exact.residual, 0.0);
        assert!(exact.pass);
        gram[(0, 1)] += 1e-3;
        gram[(1, 0)] += 1e-3;
        let bad = verify_certificate(&t, &SosCertificate { gram, basis, residual: 0.0 });
        assert!((bad.residual - 2e-3).abs() < 1e-12);
        assert!(!bad.pass);
    }

    fn matrix_feasible(m: &PolyMatrix) -> bool {
        let mut prob = SdpProblem::new();
        match compile(&mut prob, &SosConstraint::matrix("s", AffinePolyMatrix::from_poly_matrix(m))) {
            Ok(c) => {
                let s = solve(&prob, &SolverConfig::default()).unwrap();
                if s.status.is_feasible() {
                    let cert = c.certificate(&s);
                    assert!(verify_certificate(&TargetInstance::Matrix(m.clone()), &cert).pass);
                    true
                } else {
                    false
                }
            }
            Err(SosError::Unrepresentable { .. }) => false,
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn matrix_examples() {
        let x = x1(1, 0);
        let one = Polynomial::constant(1, 1.0);
        let zero = Polynomial::zero(1);
        let diag = PolyMatrix::from_rows(vec![vec![x.pow(2), zero.clone()], vec![zero.clone(), one.clone()]], 1).unwrap();
        assert!(matrix_feasible(&diag));
        let rank1 = PolyMatrix::from_rows(vec![vec![one.clone(), x.clone()], vec![x.clone(), x.pow(2)]], 1).unwrap();
        assert!(matrix_feasible(&rank1));
        let swap = PolyMatrix::from_rows(vec![vec![zero.clone(), one.clone()], vec![one, zero]], 1).unwrap();
        assert!(!matrix_feasible(&swap));
    }

    #[test]
    fn constant_matrix_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 20 {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            let c: f64 = rng.random_range(-2.0..2.0);
            let m = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
            let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if min.abs() < 1e-2 {
                continue;
            }
            let pm = PolyMatrix::from_constant(&m, 1);
            assert_eq!(matrix_feasible(&pm), min > 0.0, "matrix {m}");
            checked += 1;
        }
    }

    #[test]
    fn support_basis_is_sound_for_even_quartic() {
        // x1^2 x2^2 + x1^4: the basis must not contain the constant or x2^2
        let a = x1(2, 0);
        let b = x1(2, 1);
        let p = &(&a.pow(2) * &b.pow(2)) + &a.pow(4);
        let basis = basis_from_support(&p.support_for_test(), 2);
        assert!(basis.contains(&Monomial::new(vec![2, 0])));
        assert!(basis.contains(&Monomial::new(vec![1, 1])));
        assert!(!basis.contains(&Monomial::new(vec![0, 2])));
        assert!(!basis.contains(&Monomial::new(vec![0, 0])));
    }

    impl Polynomial {
        fn support_for_test(&self) -> Vec<Monomial> {
            self.terms().map(|(m, _)| m.clone()).collect()
        }
    }

    fn random_psd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let f = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        &f * f.transpose()
    }

    #[test]
    fn gram_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let basis = monomials_up_to(2, 0, 2);
        for _ in 0..100 {
            let q = random_psd(&mut rng, basis.len());
            let cert = SosCertificate { gram: q, basis: basis.clone(), residual: 0.0 };
            let mut p = Polynomial::zero(2);
            for i in 0..basis.len() {
                for j in 0..basis.len() {
                    p.add_term(basis[i].mul(&basis[j]), cert.gram[(i, j)]);
                }
            }
            let mut prob = SdpProblem::new();
            let c = compile(
                &mut prob,
                &SosConstraint { name: "p".into(), target: SosTarget::Scalar(AffinePoly::from_poly(&p)), basis: Some(basis.clone()) },
            )
            .unwrap();
            let s = solve(&prob, &SolverConfig::default()).unwrap();
            assert!(s.status.is_feasible());
            let got = c.certificate(&s);
            assert!(got.residual <= 1e-8, "residual {}", got.residual);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn passing_certificate_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let basis = monomials_up_to(2, 0, 2);
            let q = random_psd(&mut rng, basis.len());
            let mut p = Polynomial::zero(2);
            for i in 0..basis.len() {
                for j in 0..basis.len() {
                    p.add_term(basis[i].mul(&basis[j]), q[(i, j)]);
                }
            }
            let (s, c) = solve_scalar(&p).unwrap();
            prop_assert!(s.status.is_feasible());
            let rep = verify_certificate(&TargetInstance::Scalar(p.clone()), &c.certificate(&s));
            prop_assert!(rep.pass);
            for _ in 0..1000 {
                let pt = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let r2: f64 = pt[0] * pt[0] + pt[1] * pt[1];
                let v = p.eval(&pt).unwrap();
                prop_assert!(v >= -1e-5 * (1.0 + r2.sqrt().powi(p.degree() as i32)));
            }
        }
    }
}
