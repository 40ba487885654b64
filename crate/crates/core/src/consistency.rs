//! Data-consistent model sets and their matrix-ellipsoid overapproximation.
//!
//! Each sample constrains `ζ = (A, B)ᵀ` through a quadratic matrix
//! inequality. The intersection over all samples is enclosed in the
//! ellipsoid `{ζ : (ζ − ζ̄)ᵀ Ā (ζ − ζ̄) ⪯ I}` by a max-det SDP (S-procedure
//! with multipliers `τᵢ ≥ 0`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{regressor_matrices, DataError, Dataset};
use crate::poly::FunctionLibrary;
use crate::sdp::{solve_maxdet, LinExpr, SdpError, SdpProblem, SdpStatus, SolverConfig, VarRef};

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("overapproximation program is {status:?}; {guidance}")]
    Infeasible { status: SdpStatus, guidance: String },
    #[error("model is invalid: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-sample data `Cᵢ = ẋẋᵀ − δI`, `Bᵢ = −zᵢẋᵀ`, `Aᵢ = zᵢzᵢᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleQuadric {
    pub c: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

pub fn build_sample_quadrics(ds: &Dataset, lib: &FunctionLibrary) -> Result<Vec<SampleQuadric>, ConsistencyError> {
    let n = ds.n();
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let z = lib.regressor(&s.x, &s.u).map_err(DataError::from)?;
        let xd = DVector::from_column_slice(&s.xdot);
        out.push(SampleQuadric {
            c: &xd * xd.transpose() - DMatrix::identity(n, n) * ds.delta,
            b: -(&z * xd.transpose()),
            a: &z * z.transpose(),
        });
    }
    Ok(out)
}

/// Matrix ellipsoid `Ī = {ζ̄ + Ā^{-1/2} Υ Q̄^{1/2} : ‖Υ‖ ≤ 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidModel {
    #[serde(with = "crate::serde_mat")]
    pub abar: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub bbar: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub zeta_bar: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub qbar: DMatrix<f64>,
    pub taus: Vec<f64>,
    pub log_det: f64,
    #[serde(default)]
    pub dataset_hash: String,
    #[serde(default)]
    pub config_hash: String,
}

impl EllipsoidModel {
    /// Recomputes `ζ̄ = −Ā⁻¹B̄` and `Q̄ = I` from `(Ā, B̄)`.
    pub fn from_abar_bbar(abar: DMatrix<f64>, bbar: DMatrix<f64>, taus: Vec<f64>) -> Result<Self, ConsistencyError> {
        let chol = abar
            .clone()
            .cholesky()
            .ok_or_else(|| ConsistencyError::InvalidModel("Abar is not positive definite".into()))?;
        let zeta_bar = -chol.solve(&bbar);
        let n = bbar.ncols();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(EllipsoidModel {
            abar,
            bbar,
            zeta_bar,
            qbar: DMatrix::identity(n, n),
            taus,
            log_det,
            dataset_hash: String::new(),
            config_hash: String::new(),
        })
    }

    /// Number of regressor rows `N + M`.
    pub fn k(&self) -> usize {
        self.abar.nrows()
    }

    pub fn n(&self) -> usize {
        self.bbar.ncols()
    }

    pub fn validate(&self) -> Result<(), ConsistencyError> {
        let k = self.k();
        let n = self.n();
        if self.abar.ncols() != k || self.bbar.nrows() != k || self.zeta_bar.shape() != (k, n) || self.qbar.shape() != (n, n) {
            return Err(ConsistencyError::InvalidModel("inconsistent matrix shapes".into()));
        }
        if self.abar.clone().cholesky().is_none() {
            return Err(ConsistencyError::InvalidModel("Abar is not positive definite".into()));
        }
        let recon = -self.abar.clone().cholesky().unwrap().solve(&self.bbar);
        if (&recon - &self.zeta_bar).amax() > 1e-8 * (1.0 + self.zeta_bar.amax()) {
            return Err(ConsistencyError::InvalidModel("zeta_bar does not equal -Abar^-1 Bbar".into()));
        }
        if self.taus.iter().any(|t| *t < -1e-9) {
            return Err(ConsistencyError::InvalidModel("negative multiplier".into()));
        }
        Ok(())
    }

    /// `Ā^{-1/2}`.
    pub fn abar_inv_sqrt(&self) -> DMatrix<f64> {
        sym_pow(&self.abar, -0.5)
    }

    /// `ζ = ζ̄ + Ā^{-1/2} Υ Q̄^{1/2}` for a `(N+M)×n` contraction `Υ`.
    pub fn member(&self, upsilon: &DMatrix<f64>) -> DMatrix<f64> {
        &self.zeta_bar + self.abar_inv_sqrt() * upsilon * sym_pow(&self.qbar, 0.5)
    }

    /// The center model `(A, B) = ζ̄ᵀ`.
    pub fn center_ab(&self) -> DMatrix<f64> {
        self.zeta_bar.transpose()
    }
}

/// `Mᵖ` for symmetric `M` via eigendecomposition, eigenvalues floored at 1e-12.
pub fn sym_pow(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(1e-12).powf(p)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Maximizes `log det Ā` subject to the S-procedure LMI that makes `Ī`
/// contain every model consistent with the samples.
pub fn solve_overapproximation(
    quadrics: &[SampleQuadric],
    cfg: &SolverConfig,
) -> Result<EllipsoidModel, ConsistencyError> {
    let Some(first) = quadrics.first() else {
        return Err(ConsistencyError::Infeasible {
            status: SdpStatus::Infeasible,
            guidance: "no samples were supplied".into(),
        });
    };
    let n = first.c.nrows();
    let k = first.a.nrows();
    // The program is invariant under z -> D z and (ẋ, δ) -> (ẋ, δ)/s, so the
    // data is equilibrated before solving and the result mapped back.
    let count = quadrics.len() as f64;
    let s2 = quadrics.iter().map(|q| q.c.amax()).sum::<f64>() / count;
    let s2 = if s2 > 0.0 { s2 } else { 1.0 };
    let d = DVector::from_fn(k, |j, _| {
        let ms = quadrics.iter().map(|q| q.a[(j, j)]).sum::<f64>() / count;
        if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 }
    });
    let dm = DMatrix::from_diagonal(&d);
    // Each τᵢ also absorbs a positive rescaling of its own quadric.
    let mut kappa = Vec::with_capacity(quadrics.len());
    let scaled: Vec<SampleQuadric> = quadrics
        .iter()
        .map(|q| {
            let (c, b, a) = (&q.c / s2, &dm * &q.b / s2.sqrt(), &dm * &q.a * &dm);
            let m = c.amax().max(b.amax()).max(a.amax());
            let kp = if m > 0.0 { 1.0 / m } else { 1.0 };
            kappa.push(kp);
            SampleQuadric { c: c * kp, b: b * kp, a: a * kp }
        })
        .collect();
    let quadrics = &scaled;
    let mut p = SdpProblem::new();
    p.set_group("overapproximation");
    let abar = p.add_block("Abar", k);
    let bbar: Vec<Vec<VarRef>> = (0..k)
        .map(|i| (0..n).map(|j| VarRef::scalar(p.add_scalar(&format!("Bbar[{i},{j}]"), None))).collect())
        .collect();
    let taus: Vec<VarRef> = (0..quadrics.len())
        .map(|i| VarRef::scalar(p.add_scalar(&format!("tau[{i}]"), Some(0.0))))
        .collect();

    // −L ⪰ 0 with L the 3×3 block matrix of sizes (n, k, k).
    let dim = n + 2 * k;
    let mut m = vec![vec![LinExpr::zero(); dim]; dim];
    let set = |m: &mut Vec<Vec<LinExpr>>, i: usize, j: usize, e: LinExpr| {
        m[i][j] = e.clone();
        m[j][i] = e;
    };
    for i in 0..n {
        for j in i..n {
            let mut e = LinExpr::constant(if i == j { 1.0 } else { 0.0 });
            for (q, t) in quadrics.iter().zip(&taus) {
                e.add_term(*t, q.c[(i, j)]);
            }
            set(&mut m, i, j, e);
        }
    }
    for r in 0..k {
        for j in 0..n {
            let mut e = LinExpr::var(bbar[r][j]).scaled(-1.0);
            for (q, t) in quadrics.iter().zip(&taus) {
                e.add_term(*t, q.b[(r, j)]);
            }
            set(&mut m, n + r, j, e);
            set(&mut m, n + k + r, j, LinExpr::var(bbar[r][j]).scaled(-1.0));
        }
    }
    for r in 0..k {
        for c in r..k {
            let mut e = LinExpr::var(VarRef::entry(abar, r, c)).scaled(-1.0);
            for (q, t) in quadrics.iter().zip(&taus) {
                e.add_term(*t, q.a[(r, c)]);
            }
            set(&mut m, n + r, n + c, e);
            set(&mut m, n + k + r, n + k + c, LinExpr::var(VarRef::entry(abar, r, c)));
        }
    }
    p.add_lmi("overapproximation", &m);
    p.set_logdet_objective(abar);

    let sol = solve_maxdet(&p, cfg)?;
    if !sol.status.is_feasible() {
        let guidance = match sol.status {
            SdpStatus::NumericalFailure => {
                "the solver stalled before reaching the tolerances; retry with another solver_tol or a different data realization"
            }
            _ => "collect more samples so that the stacked regressor [Z0; W0] has full row rank",
        };
        return Err(ConsistencyError::Infeasible { status: sol.status, guidance: guidance.into() });
    }
    let a = DMatrix::from_fn(k, k, |i, j| sol.block(abar)[(i, j)] / (d[i] * d[j] * s2));
    let b = DMatrix::from_fn(k, n, |i, j| sol.var(bbar[i][j]) / (d[i] * s2.sqrt()));
    let t = taus.iter().zip(&kappa).map(|(v, kp)| sol.var(*v).max(0.0) * kp / s2).collect();
    let model = EllipsoidModel::from_abar_bbar(a, b, t).map_err(|_| ConsistencyError::Infeasible {
        status: SdpStatus::NumericalFailure,
        guidance: "the returned Abar is singular; collect more samples so that [Z0; W0] has full row rank".into(),
    })?;
    log::info!("overapproximation: log det Abar = {:.4}", model.log_det);
    Ok(model)
}

/// True iff every sample satisfies `|ẋᵢ − AB zᵢ|² ≤ δ + 1e-9`.
pub fn membership_exact(ab: &DMatrix<f64>, ds: &Dataset, lib: &FunctionLibrary) -> Result<bool, ConsistencyError> {
    let k = lib.n_z() + lib.n_w();
    if ab.nrows() != ds.n() || ab.ncols() != k {
        return Err(ConsistencyError::InvalidModel(format!("AB must be {}x{k}", ds.n())));
    }
    for s in &ds.samples {
        let z = lib.regressor(&s.x, &s.u).map_err(DataError::from)?;
        let r = DVector::from_column_slice(&s.xdot) - ab * z;
        if r.norm_squared() > ds.delta + 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// Largest eigenvalue of `(ζ − ζ̄)ᵀ Ā (ζ − ζ̄) − I`.
    pub max_eig: f64,
    pub tolerance: f64,
    pub member: bool,
}

/// Ellipsoid membership of `ζ = ABᵀ`, with tolerance `1e-6·(1 + ‖Ā‖ + ‖B̄‖)`.
pub fn membership_ellipsoid(ab: &DMatrix<f64>, model: &EllipsoidModel) -> Result<MembershipReport, ConsistencyError> {
    if ab.nrows() != model.n() || ab.ncols() != model.k() {
        return Err(ConsistencyError::InvalidModel(format!("AB must be {}x{}", model.n(), model.k())));
    }
    let dz = ab.transpose() - &model.zeta_bar;
    let lhs = dz.transpose() * &model.abar * &dz - DMatrix::identity(model.n(), model.n());
    let max_eig = SymmetricEigen::new((&lhs + lhs.transpose()) * 0.5).eigenvalues.max();
    let scale = model.abar.norm() + model.bbar.norm();
    let tolerance = 1e-6 * (1.0 + scale);
    Ok(MembershipReport { max_eig, tolerance, member: max_eig <= tolerance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub full_row_rank: bool,
    pub singular_values: Vec<f64>,
    pub rows: usize,
    pub samples: usize,
}

/// SVD of `[Z₀; W₀]`; full row rank iff `σ_min > 1e-8·σ_max`.
pub fn rank_check(ds: &Dataset, lib: &FunctionLibrary) -> Result<RankReport, ConsistencyError> {
    let (z0, w0) = regressor_matrices(ds, lib)?;
    let k = z0.nrows() + w0.nrows();
    let t = ds.len();
    let mut stacked = DMatrix::zeros(k, t);
    stacked.rows_mut(0, z0.nrows()).copy_from(&z0);
    stacked.rows_mut(z0.nrows(), w0.nrows()).copy_from(&w0);
    let mut sv: Vec<f64> = stacked.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let full = t >= k && sv.len() == k && {
        let max = sv[0];
        let min = sv[k - 1];
        max > 0.0 && min > 1e-8 * max
    };
    Ok(RankReport { full_row_rank: full, singular_values: sv, rows: k, samples: t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::poly::{PolyMatrix, Polynomial};

    fn scalar_lib() -> FunctionLibrary {
        FunctionLibrary::new(1, vec![Polynomial::var(1, 0)], PolyMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn quadric_definitions() {
        let ds = Dataset::new(vec![Sample { t: 0.0, x: vec![0.0, 0.0], u: vec![0.0], xdot: vec![0.0, 0.0] }], 1.0).unwrap();
        let q = build_sample_quadrics(&ds, &crate::benchmark::library()).unwrap();
        assert_eq!(q[0].c, -DMatrix::<f64>::identity(2, 2));

        let ds = Dataset::new(vec![Sample { t: 0.0, x: vec![1.0], u: vec![0.0], xdot: vec![0.5] }], 1.0).unwrap();
        let q = build_sample_quadrics(&ds, &scalar_lib()).unwrap();
        let e1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(q[0].a, e1);
        assert_eq!(q[0].b, DMatrix::from_row_slice(2, 1, &[-0.5, 0.0]));
    }

    #[test]
    fn sym_pow_inverts() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_pow(&a, -0.5);
        let id = &r * &a * &r;
        assert!((id - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn rank_edge_cases() {
        let lib = crate::benchmark::library();
        let s = Sample { t: 0.0, x: vec![1.0, 2.0], u: vec![0.3], xdot: vec![0.0, 0.0] };
        let few = Dataset::new(vec![s.clone(); 3], 1.0).unwrap();
        assert!(!rank_check(&few, &lib).unwrap().full_row_rank);
        let dup = Dataset::new(vec![s; 20], 1.0).unwrap();
        let r = rank_check(&dup, &lib).unwrap();
        assert!(!r.full_row_rank);
        assert!(r.singular_values[1] <= 1e-8 * r.singular_values[0]);
    }
}
