//! Sparse multivariate polynomials with `f64` coefficients.
//!
//! Terms are kept in a `BTreeMap` keyed by [`Monomial`], whose ordering is
//! graded lexicographic, so iteration and serialization are deterministic.
//! Zero coefficients are never stored; the zero polynomial is an empty map
//! that still carries its variable count.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("variable count mismatch: {left} vs {right}")]
    VariableMismatch { left: usize, right: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid function library: {0}")]
    InvalidLibrary(String),
}

/// Exponent vector of a monomial, one entry per variable.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    /// The monomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Monomial(e)
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.nvars(), other.nvars());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Exponent-wise halving; `None` unless every exponent is even.
    pub fn half(&self) -> Option<Monomial> {
        if self.0.iter().all(|e| e % 2 == 0) {
            Some(Monomial(self.0.iter().map(|e| e / 2).collect()))
        } else {
            None
        }
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .fold(1.0, |acc, (&e, &x)| if e == 0 { acc } else { acc * x.powi(e as i32) })
    }

    /// `∂/∂x_i` as (multiplier, monomial), or `None` when the variable is absent.
    pub fn derivative(&self, i: usize) -> Option<(f64, Monomial)> {
        let e = self.0[i];
        if e == 0 {
            return None;
        }
        let mut out = self.0.clone();
        out[i] -= 1;
        Some((e as f64, Monomial(out)))
    }

    /// Re-index into a space of `nvars` variables; variable `j` moves to `map[j]`.
    pub fn remap(&self, nvars: usize, map: &[usize]) -> Monomial {
        let mut out = vec![0; nvars];
        for (j, &e) in self.0.iter().enumerate() {
            out[map[j]] += e;
        }
        Monomial(out)
    }

    pub fn format_with(&self, names: &[String]) -> String {
        let mut parts = Vec::new();
        for (i, &e) in self.0.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("x{}", i + 1));
            match e {
                0 => {}
                1 => parts.push(name),
                _ => parts.push(format!("{name}^{e}")),
            }
        }
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.format_with(&[]))
    }
}

/// All monomials in `nvars` variables with total degree in `[min_deg, max_deg]`,
/// in canonical order.
pub fn monomials_up_to(nvars: usize, min_deg: u32, max_deg: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in min_deg..=max_deg {
        let mut cur = vec![0u32; nvars];
        fill_degree(&mut cur, 0, d, &mut out);
    }
    out.sort();
    out
}

fn fill_degree(cur: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Monomial>) {
    if cur.is_empty() {
        if remaining == 0 {
            out.push(Monomial(Vec::new()));
        }
        return;
    }
    if pos == cur.len() - 1 {
        cur[pos] = remaining;
        out.push(Monomial(cur.clone()));
        cur[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e;
        fill_degree(cur, pos + 1, remaining - e, out);
    }
    cur[pos] = 0;
}

#[derive(Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::monomial(Monomial::one(nvars), c)
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        Self::monomial(Monomial::var(nvars, i), 1.0)
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let nvars = m.nvars();
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert(m, c);
        }
        Polynomial { nvars, terms }
    }

    /// Builds a polynomial from possibly repeated terms, merging like terms.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut p = Polynomial::zero(nvars);
        for (m, c) in terms {
            if m.nvars() != nvars {
                return Err(PolyError::VariableMismatch { left: nvars, right: m.nvars() });
            }
            p.add_term(m, c);
        }
        Ok(p)
    }

    /// `Σ_{i in vars} x_i²`.
    pub fn squared_norm(nvars: usize, vars: std::ops::Range<usize>) -> Self {
        let mut p = Polynomial::zero(nvars);
        for i in vars {
            let mut e = vec![0; nvars];
            e[i] = 2;
            p.add_term(Monomial(e), 1.0);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Lowest total degree among stored terms; 0 for the zero polynomial.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        debug_assert_eq!(m.nvars(), self.nvars);
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let v = *o.get() + c;
                if v == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = v;
                }
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    fn check(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars != other.nvars {
            Err(PolyError::VariableMismatch { left: self.nvars, right: other.nvars })
        } else {
            Ok(())
        }
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut out = Polynomial::zero(self.nvars);
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(self.nvars);
        }
        Polynomial {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(m, &c)| (m.clone(), c * s))
                .filter(|(_, c)| *c != 0.0)
                .collect(),
        }
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.nvars {
            return Err(PolyError::Dimension { expected: self.nvars, got: point.len() });
        }
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(point)).sum())
    }

    pub fn derivative(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in self.terms() {
            if let Some((k, dm)) = m.derivative(i) {
                out.add_term(dm, c * k);
            }
        }
        out
    }

    /// Gradient with respect to the first `n` variables.
    pub fn gradient(&self, n: usize) -> Vec<Polynomial> {
        (0..n).map(|i| self.derivative(i)).collect()
    }

    /// Substitutes `x_i = value`, keeping the variable count.
    pub fn set_variable(&self, i: usize, value: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in self.terms() {
            let e = m.0[i];
            let mut mm = m.0.clone();
            mm[i] = 0;
            let factor = if e == 0 { 1.0 } else { value.powi(e as i32) };
            out.add_term(Monomial(mm), c * factor);
        }
        out
    }

    /// Embeds into `nvars` variables; variable `j` becomes `map[j]`.
    pub fn remap(&self, nvars: usize, map: &[usize]) -> Polynomial {
        assert_eq!(map.len(), self.nvars, "remap table must cover every variable");
        let mut out = Polynomial::zero(nvars);
        for (m, c) in self.terms() {
            out.add_term(m.remap(nvars, map), c);
        }
        out
    }

    /// Embeds into a larger space by appending unused variables.
    pub fn extend_vars(&self, nvars: usize) -> Polynomial {
        let map: Vec<usize> = (0..self.nvars).collect();
        self.remap(nvars, &map)
    }

    /// Drops terms with `|coeff| <= tol`.
    pub fn prune(&self, tol: f64) -> Polynomial {
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().filter(|(_, c)| c.abs() > tol).map(|(m, &c)| (m.clone(), c)).collect(),
        }
    }

    /// Fixes the variable count of a deserialized polynomial. An empty
    /// polynomial adopts `nvars`; otherwise the counts must agree.
    pub fn conform(mut self, nvars: usize) -> Result<Polynomial, PolyError> {
        if self.terms.is_empty() {
            self.nvars = nvars;
            Ok(self)
        } else if self.nvars == nvars {
            Ok(self)
        } else {
            Err(PolyError::VariableMismatch { left: nvars, right: self.nvars })
        }
    }

    pub fn format_with(&self, names: &[String], precision: usize) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut s = String::new();
        for (idx, (m, c)) in self.terms().enumerate() {
            let mag = c.abs();
            if idx == 0 {
                if c < 0.0 {
                    s.push('-');
                }
            } else {
                s.push_str(if c < 0.0 { " - " } else { " + " });
            }
            if m.is_constant() {
                s.push_str(&format!("{mag:.precision$}"));
            } else {
                s.push_str(&format!("{mag:.precision$}*{}", m.format_with(names)));
            }
        }
        s
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.format_with(&[], 6))
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.format_with(&[], 4))
    }
}

// Operator forms panic on a variable-count mismatch; use the `try_*`
// methods where the inputs are not already known to agree.
impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs).expect("polynomial addition")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_sub(rhs).expect("polynomial subtraction")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs).expect("polynomial multiplication")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct TermJson {
    exponents: Vec<u32>,
    coeff: f64,
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let terms: Vec<TermJson> = self
            .terms()
            .map(|(m, c)| TermJson { exponents: m.0.clone(), coeff: c })
            .collect();
        terms.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let terms = Vec::<TermJson>::deserialize(deserializer)?;
        let nvars = terms.first().map(|t| t.exponents.len()).unwrap_or(0);
        let mut p = Polynomial::zero(nvars);
        for t in terms {
            if t.exponents.len() != nvars {
                return Err(serde::de::Error::custom(format!(
                    "term has {} exponents, expected {nvars}",
                    t.exponents.len()
                )));
            }
            if !t.coeff.is_finite() {
                return Err(serde::de::Error::custom("non-finite coefficient"));
            }
            p.add_term(Monomial(t.exponents), t.coeff);
        }
        Ok(p)
    }
}

/// Dense matrix of polynomials over a common variable set.
#[derive(Clone, PartialEq, Debug)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<Polynomial>,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        PolyMatrix { rows, cols, nvars, entries: vec![Polynomial::zero(nvars); rows * cols] }
    }

    pub fn identity(n: usize, nvars: usize) -> Self {
        let mut m = Self::zeros(n, n, nvars);
        for i in 0..n {
            m.set(i, i, Polynomial::constant(nvars, 1.0));
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<Polynomial>>, nvars: usize) -> Result<Self, PolyError> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(PolyError::Dimension { expected: c, got: row.len() });
            }
            for p in row {
                entries.push(p.conform(nvars)?);
            }
        }
        Ok(PolyMatrix { rows: r, cols: c, nvars, entries })
    }

    pub fn from_constant(m: &DMatrix<f64>, nvars: usize) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols(), nvars);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.set(i, j, Polynomial::constant(nvars, m[(i, j)]));
            }
        }
        out
    }

    pub fn column(v: Vec<Polynomial>, nvars: usize) -> Result<Self, PolyError> {
        Self::from_rows(v.into_iter().map(|p| vec![p]).collect(), nvars)
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

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        assert_eq!(p.nvars(), self.nvars);
        self.entries[i * self.cols + j] = p;
    }

    pub fn entries(&self) -> &[Polynomial] {
        &self.entries
    }

    pub fn transpose(&self) -> PolyMatrix {
        let mut out = Self::zeros(self.cols, self.rows, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    pub fn try_mul(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.cols != other.rows {
            return Err(PolyError::Dimension { expected: self.cols, got: other.rows });
        }
        if self.nvars != other.nvars {
            return Err(PolyError::VariableMismatch { left: self.nvars, right: other.nvars });
        }
        let mut out = Self::zeros(self.rows, other.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Polynomial::zero(self.nvars);
                for k in 0..self.cols {
                    let a = self.get(i, k);
                    let b = other.get(k, j);
                    if !a.is_zero() && !b.is_zero() {
                        acc = &acc + &(a * b);
                    }
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn try_add(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PolyError::Dimension { expected: self.rows * self.cols, got: other.rows * other.cols });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.try_add(b))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PolyMatrix { entries, ..*self })
    }

    pub fn try_sub(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        self.try_add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> PolyMatrix {
        PolyMatrix { entries: self.entries.iter().map(|p| p.scale(s)).collect(), ..*self }
    }

    /// Left multiplication by a constant matrix.
    pub fn left_mul_const(&self, m: &DMatrix<f64>) -> Result<PolyMatrix, PolyError> {
        PolyMatrix::from_constant(m, self.nvars).try_mul(self)
    }

    pub fn eval(&self, point: &[f64]) -> Result<DMatrix<f64>, PolyError> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).eval(point)?;
            }
        }
        Ok(out)
    }

    pub fn degree(&self) -> u32 {
        self.entries.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    /// Coefficientwise symmetry up to `tol`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self.get(i, j) - self.get(j, i);
                if d.max_abs_coeff() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn conform(self, nvars: usize) -> Result<PolyMatrix, PolyError> {
        let rows = self.rows;
        let cols = self.cols;
        let entries = self.entries.into_iter().map(|p| p.conform(nvars)).collect::<Result<Vec<_>, _>>()?;
        Ok(PolyMatrix { rows, cols, nvars, entries })
    }
}

impl Serialize for PolyMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<&Polynomial>> =
            (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).collect()).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PolyMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<Polynomial>>::deserialize(deserializer)?;
        let nvars = rows
            .iter()
            .flatten()
            .find(|p| !p.is_zero())
            .map(Polynomial::nvars)
            .unwrap_or(0);
        PolyMatrix::from_rows(rows, nvars).map_err(serde::de::Error::custom)
    }
}

/// Entry `(i, j)` is `∂v_i/∂x_j` for the first `n` variables.
pub fn jacobian(v: &[Polynomial], n: usize) -> PolyMatrix {
    let nvars = v.first().map(Polynomial::nvars).unwrap_or(n);
    let mut out = PolyMatrix::zeros(v.len(), n, nvars);
    for (i, p) in v.iter().enumerate() {
        for j in 0..n {
            out.set(i, j, p.derivative(j));
        }
    }
    out
}

/// Gradient of `V(x) = Ẑ(x)ᵀ P⁻¹ Ẑ(x)`, i.e. `2 (∂Ẑ/∂x)ᵀ P⁻¹ Ẑ`.
pub fn gradient_of_quadratic_form(zhat: &[Polynomial], pinv: &DMatrix<f64>) -> Result<Vec<Polynomial>, PolyError> {
    let k = zhat.len();
    if pinv.nrows() != k || pinv.ncols() != k {
        return Err(PolyError::Dimension { expected: k, got: pinv.nrows() });
    }
    let nvars = zhat.first().map(Polynomial::nvars).unwrap_or(0);
    let jac = jacobian(zhat, nvars);
    // P⁻¹ Ẑ
    let mut pz = Vec::with_capacity(k);
    for i in 0..k {
        let mut acc = Polynomial::zero(nvars);
        for (j, z) in zhat.iter().enumerate() {
            if pinv[(i, j)] != 0.0 {
                acc = &acc + &z.scale(pinv[(i, j)]);
            }
        }
        pz.push(acc);
    }
    let mut grad = Vec::with_capacity(nvars);
    for col in 0..nvars {
        let mut acc = Polynomial::zero(nvars);
        for (i, pzi) in pz.iter().enumerate() {
            acc = &acc + &(jac.get(i, col) * pzi);
        }
        grad.push(acc.scale(2.0));
    }
    Ok(grad)
}

/// Quadratic form `Ẑᵀ M Ẑ` for a constant symmetric `M`.
pub fn quadratic_form(zhat: &[Polynomial], m: &DMatrix<f64>) -> Result<Polynomial, PolyError> {
    let k = zhat.len();
    if m.nrows() != k || m.ncols() != k {
        return Err(PolyError::Dimension { expected: k, got: m.nrows() });
    }
    let nvars = zhat.first().map(Polynomial::nvars).unwrap_or(0);
    let mut acc = Polynomial::zero(nvars);
    for i in 0..k {
        for j in 0..k {
            if m[(i, j)] != 0.0 {
                acc = &acc + &(&zhat[i] * &zhat[j]).scale(m[(i, j)]);
            }
        }
    }
    Ok(acc)
}

/// Known monomial libraries `Z`, `W` and the optional factorization `Z = H Ẑ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionLibrary {
    /// Number of state variables `n`.
    pub nvars: usize,
    pub z: Vec<Polynomial>,
    /// `M × m` input library.
    pub w: PolyMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zhat: Option<Vec<Polynomial>>,
    /// `N × N̂` factor with `Z = H Ẑ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<PolyMatrix>,
}

impl FunctionLibrary {
    pub fn new(nvars: usize, z: Vec<Polynomial>, w: PolyMatrix) -> Result<Self, PolyError> {
        let lib = FunctionLibrary { nvars, z, w, zhat: None, h: None };
        lib.validate()?;
        Ok(lib)
    }

    pub fn with_factorization(mut self, zhat: Vec<Polynomial>, h: PolyMatrix) -> Result<Self, PolyError> {
        self.zhat = Some(zhat);
        self.h = Some(h);
        self.validate()?;
        Ok(self)
    }

    /// Brings every polynomial to `nvars` variables after deserialization.
    pub fn normalized(self) -> Result<Self, PolyError> {
        let n = self.nvars;
        let z = self.z.into_iter().map(|p| p.conform(n)).collect::<Result<Vec<_>, _>>()?;
        let w = self.w.conform(n)?;
        let zhat = match self.zhat {
            Some(v) => Some(v.into_iter().map(|p| p.conform(n)).collect::<Result<Vec<_>, _>>()?),
            None => None,
        };
        let h = match self.h {
            Some(h) => Some(h.conform(n)?),
            None => None,
        };
        let lib = FunctionLibrary { nvars: n, z, w, zhat, h };
        lib.validate()?;
        Ok(lib)
    }

    /// `N`
    pub fn n_z(&self) -> usize {
        self.z.len()
    }

    /// `M`
    pub fn n_w(&self) -> usize {
        self.w.rows()
    }

    /// Input dimension `m`.
    pub fn n_inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<(), PolyError> {
        let zero = Monomial::one(self.nvars);
        for (i, p) in self.z.iter().enumerate() {
            if p.nvars() != self.nvars {
                return Err(PolyError::VariableMismatch { left: self.nvars, right: p.nvars() });
            }
            if p.coeff(&zero) != 0.0 {
                return Err(PolyError::InvalidLibrary(format!("Z[{i}] has a nonzero constant term; Z(0) must vanish")));
            }
        }
        if self.w.nvars() != self.nvars && !self.w.entries().iter().all(Polynomial::is_zero) {
            return Err(PolyError::VariableMismatch { left: self.nvars, right: self.w.nvars() });
        }
        match (&self.zhat, &self.h) {
            (None, None) => {}
            (Some(zhat), Some(h)) => {
                if h.rows() != self.z.len() || h.cols() != zhat.len() {
                    return Err(PolyError::InvalidLibrary(format!(
                        "H must be {}x{}, got {}x{}",
                        self.z.len(),
                        zhat.len(),
                        h.rows(),
                        h.cols()
                    )));
                }
                for (i, p) in zhat.iter().enumerate() {
                    if p.coeff(&zero) != 0.0 {
                        return Err(PolyError::InvalidLibrary(format!("Zhat[{i}] has a nonzero constant term")));
                    }
                }
                let col = PolyMatrix::column(zhat.clone(), self.nvars)?;
                let hz = h.try_mul(&col)?;
                for (i, zi) in self.z.iter().enumerate() {
                    let diff = hz.get(i, 0) - zi;
                    if diff.max_abs_coeff() > 1e-12 {
                        return Err(PolyError::InvalidLibrary(format!(
                            "row {i} of H*Zhat differs from Z by {:.3e}",
                            diff.max_abs_coeff()
                        )));
                    }
                }
            }
            _ => {
                return Err(PolyError::InvalidLibrary("Zhat and H must be supplied together".into()));
            }
        }
        Ok(())
    }

    pub fn eval_z(&self, x: &[f64]) -> Result<DVector<f64>, PolyError> {
        let v = self.z.iter().map(|p| p.eval(x)).collect::<Result<Vec<_>, _>>()?;
        Ok(DVector::from_vec(v))
    }

    pub fn eval_w(&self, x: &[f64]) -> Result<DMatrix<f64>, PolyError> {
        self.w.eval(x)
    }

    /// `(Z(x), W(x) u)` stacked.
    pub fn regressor(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>, PolyError> {
        if u.len() != self.n_inputs() {
            return Err(PolyError::Dimension { expected: self.n_inputs(), got: u.len() });
        }
        let z = self.eval_z(x)?;
        let wu = self.eval_w(x)? * DVector::from_column_slice(u);
        let mut out = DVector::zeros(z.len() + wu.len());
        out.rows_mut(0, z.len()).copy_from(&z);
        out.rows_mut(z.len(), wu.len()).copy_from(&wu);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x(i: usize) -> Polynomial {
        Polynomial::var(2, i)
    }

    #[test]
    fn like_terms_merge() {
        let a = x(0).pow(3);
        let s = &a + &a;
        assert_eq!(s.num_terms(), 1);
        assert_eq!(s.coeff(&Monomial::new(vec![3, 0])), 2.0);
    }

    #[test]
    fn exponents_add() {
        let p = &x(0) * &x(1).pow(2);
        assert_eq!(p.num_terms(), 1);
        assert_eq!(p.coeff(&Monomial::new(vec![1, 2])), 1.0);
    }

    #[test]
    fn reference_drift_vanishes_on_diagonal() {
        // f*_1 = -x1^3 + x1 x2^2
        let f1 = &(-&x(0).pow(3)) + &(&x(0) * &x(1).pow(2));
        assert_eq!(f1.eval(&[1.0, 1.0]).unwrap(), 0.0);
        for &(a, b) in &[(0.3, -1.2), (2.0, -2.0), (-0.7, 0.1)] {
            let direct: f64 = -a * a * a + a * b * b;
            assert!((f1.eval(&[a, b]).unwrap() - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn eval_and_errors() {
        let p = &x(0).pow(2) * &x(1);
        assert_eq!(p.eval(&[2.0, -2.0]).unwrap(), -8.0);
        assert!(matches!(p.eval(&[1.0]), Err(PolyError::Dimension { .. })));
        let q = Polynomial::var(3, 0);
        assert!(matches!(p.try_add(&q), Err(PolyError::VariableMismatch { .. })));
    }

    #[test]
    fn zero_polynomial_identities() {
        let z = Polynomial::zero(2);
        let p = &x(0) + &x(1);
        assert_eq!(&p + &z, p);
        assert!((&p * &z).is_zero());
        assert!((&p - &p).is_zero());
        assert_eq!((&p - &p).nvars(), 2);
    }

    #[test]
    fn graded_order() {
        let ms = monomials_up_to(2, 0, 2);
        let expected = vec![
            Monomial::new(vec![0, 0]),
            Monomial::new(vec![1, 0]),
            Monomial::new(vec![0, 1]),
            Monomial::new(vec![2, 0]),
            Monomial::new(vec![1, 1]),
            Monomial::new(vec![0, 2]),
        ];
        assert_eq!(ms, expected);
    }

    #[test]
    fn jacobian_identity_and_power_rule() {
        let j = jacobian(&[x(0), x(1)], 2);
        let one = Polynomial::constant(2, 1.0);
        assert_eq!(j.get(0, 0), &one);
        assert!(j.get(0, 1).is_zero());
        assert_eq!(j.get(1, 1), &one);
        let j2 = jacobian(&[x(0).pow(2), x(1).pow(2)], 2);
        assert_eq!(j2.get(0, 0), &x(0).scale(2.0));
        assert!(j2.get(1, 0).is_zero());
        assert_eq!(j2.get(1, 1), &x(1).scale(2.0));
    }

    #[test]
    fn jacobian_of_cubic_library_row() {
        let z = vec![
            x(0).pow(3),
            &x(0).pow(2) * &x(1),
            &x(0) * &x(1).pow(2),
            x(1).pow(3),
        ];
        let j = jacobian(&z, 2);
        assert_eq!(j.rows(), 4);
        assert_eq!(j.get(1, 0), &(&x(0) * &x(1)).scale(2.0));
        assert_eq!(j.get(1, 1), &x(0).pow(2));
    }

    #[test]
    fn quadratic_form_gradient_simple_cases() {
        let eye = DMatrix::identity(2, 2);
        let g = gradient_of_quadratic_form(&[x(0), x(1)], &eye).unwrap();
        assert_eq!(g[0], x(0).scale(2.0));
        assert_eq!(g[1], x(1).scale(2.0));
        let g = gradient_of_quadratic_form(&[x(0).pow(2), x(1).pow(2)], &eye).unwrap();
        assert_eq!(g[0], x(0).pow(3).scale(4.0));
        assert_eq!(g[1], x(1).pow(3).scale(4.0));
        assert!(gradient_of_quadratic_form(&[x(0)], &eye).is_err());
    }

    #[test]
    fn library_rejects_constant_terms() {
        let w = PolyMatrix::identity(1, 2);
        let bad = vec![&x(0) + &Polynomial::constant(2, 1.0)];
        assert!(matches!(FunctionLibrary::new(2, bad, w.clone()), Err(PolyError::InvalidLibrary(_))));
        assert!(FunctionLibrary::new(2, vec![x(0)], w).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let p = &x(0).pow(3).scale(-1.5) + &(&x(0) * &x(1)).scale(0.25);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"exponents\""));
        let back: Polynomial = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let m = PolyMatrix::from_rows(vec![vec![p.clone(), x(1)], vec![x(0), Polynomial::zero(2)]], 2).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: PolyMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<Polynomial>(r#"[{"exponents":[1],"coeff":1.0},{"exponents":[1,2],"coeff":1.0}]"#).is_err());
    }

    fn arb_poly() -> impl Strategy<Value = Polynomial> {
        prop::collection::vec(((0u32..4, 0u32..4), -3.0f64..3.0), 0..6).prop_map(|terms| {
            Polynomial::from_terms(2, terms.into_iter().map(|((a, b), c)| (Monomial::new(vec![a, b]), c))).unwrap()
        })
    }

    proptest! {
        #[test]
        fn product_evaluates_pointwise(a in arb_poly(), b in arb_poly(), px in -2.0f64..2.0, py in -2.0f64..2.0) {
            let pt = [px, py];
            let lhs = (&a * &b).eval(&pt).unwrap();
            let rhs = a.eval(&pt).unwrap() * b.eval(&pt).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
        }

        #[test]
        fn arithmetic_commutes(a in arb_poly(), b in arb_poly()) {
            let d = &(&a * &b) - &(&b * &a);
            prop_assert!(d.max_abs_coeff() <= 1e-12 * (1.0 + (&a * &b).max_abs_coeff()));
            let s = &(&a + &b) - &(&b + &a);
            prop_assert!(s.max_abs_coeff() <= 1e-12);
        }
    }
}
