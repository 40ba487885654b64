#![allow(dead_code)]

use dd_iss::benchmark;
use dd_iss::consistency::{membership_ellipsoid, EllipsoidModel};
use dd_iss::data::{integrate_trajectory, Signal};
use dd_iss::poly::{monomials_up_to, Monomial, Polynomial};
use dd_iss::sdp::{solve, SdpProblem, SolverConfig};
use dd_iss::sos::{compile, AffinePoly, SosCertificate, SosConstraint, SosTarget};
use dd_iss::synth::ClassKInfty;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random polynomial in two variables with up to `terms` terms of
/// per-variable degree below 4.
pub fn random_poly<R: Rng>(rng: &mut R, terms: usize) -> Polynomial {
    let mut p = Polynomial::zero(2);
    for _ in 0..terms {
        let m = Monomial::new(vec![rng.random_range(0..4), rng.random_range(0..4)]);
        p.add_term(m, rng.random_range(-3.0..3.0));
    }
    p
}

fn close(a: f64, b: f64, rel: f64) -> Result<(), String> {
    if (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs())) {
        Ok(())
    } else {
        Err(format!("{a} vs {b}"))
    }
}

/// Sum, product, power and partial derivatives of `p`, `q` at `pt` against
/// pointwise arithmetic and central differences, relative tolerance 1e-5.
pub fn poly_oracle(p: &Polynomial, q: &Polynomial, pt: &[f64]) -> Result<(), String> {
    let ev = |r: &Polynomial, x: &[f64]| r.eval(x).unwrap();
    let (pv, qv) = (ev(p, pt), ev(q, pt));
    close(ev(&(p + q), pt), pv + qv, 1e-12).map_err(|e| format!("sum: {e}"))?;
    close(ev(&(p * q), pt), pv * qv, 1e-12).map_err(|e| format!("product: {e}"))?;
    close(ev(&p.pow(2), pt), pv * pv, 1e-12).map_err(|e| format!("power: {e}"))?;
    for i in 0..pt.len() {
        let h = 1e-5 * (1.0 + pt[i].abs());
        let (mut a, mut b) = (pt.to_vec(), pt.to_vec());
        a[i] += h;
        b[i] -= h;
        let fd = (ev(p, &a) - ev(p, &b)) / (2.0 * h);
        let scale = 1.0 + pv.abs();
        let exact = ev(&p.derivative(i), pt);
        if (fd - exact).abs() > 1e-5 * (scale + exact.abs()) {
            return Err(format!("d/dx{}: central difference {fd} vs symbolic {exact}", i + 1));
        }
    }
    Ok(())
}

/// Builds `p = bᵀQb` from a random PSD Gram matrix `Q` on the basis of
/// monomials of degree at most 2 in two variables, solves the SOS program
/// on that basis and returns the coefficient residual of the recovered Gram.
pub fn sos_round_trip(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = monomials_up_to(2, 0, 2);
    let f = DMatrix::from_fn(basis.len(), basis.len(), |_, _| rng.random_range(-1.0..1.0));
    let q = &f * f.transpose();
    let mut p = Polynomial::zero(2);
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            p.add_term(basis[i].mul(&basis[j]), q[(i, j)]);
        }
    }
    let mut prob = SdpProblem::new();
    let c = compile(
        &mut prob,
        &SosConstraint { name: "p".into(), target: SosTarget::Scalar(AffinePoly::from_poly(&p)), basis: Some(basis) },
    )
    .map_err(|e| e.to_string())?;
    let sol = solve(&prob, &SolverConfig::default()).map_err(|e| e.to_string())?;
    if !sol.status.is_feasible() {
        return Err(format!("status {:?}", sol.status));
    }
    let cert: SosCertificate = c.certificate(&sol);
    Ok(cert.residual)
}

/// Random ellipsoid model with `k` regressor rows and `n` states.
pub fn random_model(seed: u64, k: usize, n: usize) -> EllipsoidModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let abar = &f * f.transpose() + DMatrix::identity(k, k) * 0.1;
    let bbar = DMatrix::from_fn(k, n, |_, _| rng.random_range(-2.0..2.0));
    EllipsoidModel::from_abar_bbar(abar, bbar, vec![]).unwrap()
}

fn random_upsilon<R: Rng>(rng: &mut R, k: usize, n: usize, norm: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let s = g.singular_values().max();
    g * (norm / s)
}

/// Members `ζ̄ + Ā^{-1/2}ΥQ̄^{1/2}` with `‖Υ‖ = 1` lie on the boundary
/// (max-eig residual within 1e-8), `‖Υ‖ = 0.5` inside, `‖Υ‖ = 1.5` outside.
pub fn boundary_round_trip(model: &EllipsoidModel, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (model.k(), model.n());
    for (norm, want) in [(1.0, 0.0), (0.5, -0.75), (1.5, 1.25)] {
        let z = model.member(&random_upsilon(&mut rng, k, n, norm));
        let r = membership_ellipsoid(&z.transpose(), model).map_err(|e| e.to_string())?;
        let tol = 1e-8 * (1.0 + model.abar.amax() * model.zeta_bar.amax().powi(2));
        if (r.max_eig - want).abs() > tol.max(1e-8) {
            return Err(format!("norm {norm}: max eig {} expected {want}", r.max_eig));
        }
        if r.member != (norm <= 1.0) {
            return Err(format!("norm {norm}: member = {}", r.member));
        }
    }
    Ok(())
}

/// A class-K∞ candidate accepted by the lemma is zero at zero and strictly
/// increasing on a grid; one with a negative coefficient is rejected.
pub fn lemma_oracle(coeffs: &[f64], mu: f64) -> Result<(), String> {
    let a = ClassKInfty::new(coeffs.to_vec());
    let accepted = a.satisfies_lemma(mu);
    let admissible = coeffs.iter().all(|c| *c >= 0.0) && a.sum() >= mu;
    if accepted != admissible {
        return Err(format!("{coeffs:?}: accepted {accepted}, admissible {admissible}"));
    }
    if accepted {
        if a.eval(0.0) != 0.0 {
            return Err("alpha(0) != 0".into());
        }
        let mut prev = 0.0;
        for i in 1..=200 {
            let v = a.eval(i as f64 * 0.05);
            if !(v > prev) {
                return Err(format!("not increasing at r = {}", i as f64 * 0.05));
            }
            prev = v;
        }
        if a.eval(1e3) < a.eval(10.0) * 1e3 {
            return Err("not unbounded".into());
        }
    }
    Ok(())
}

/// Error ratio `|x_h − x_ref| / |x_{h/2} − x_ref|` on the benchmark system
/// with zero input, over `h = 0.05·2⁻ᵏ`, `k = 0..6`, with `x_ref` at the
/// finest step over 8. Taken at the finest pair whose smaller error is above
/// the round-off floor `1e-12·(1 + |x_ref|)`; `None` when no pair is (the
/// trajectory is integrated exactly to round-off, e.g. on an invariant axis).
pub fn rk4_ratio(x0: &[f64]) -> Option<f64> {
    let sys = benchmark::system();
    let (u, d) = (Signal::zero(1), Signal::zero(2));
    let end = |h: f64| integrate_trajectory(&sys, x0, &u, &d, 0.5, h).unwrap().final_state().clone();
    let hs: Vec<f64> = (0..7).map(|k| 0.05 / 2f64.powi(k)).collect();
    let reference = end(hs[6] / 8.0);
    let errs: Vec<f64> = hs.iter().map(|&h| (end(h) - &reference).norm()).collect();
    let floor = 1e-12 * (1.0 + reference.norm());
    (0..6).rev().find(|&k| errs[k + 1] > floor).map(|k| errs[k] / errs[k + 1])
}

/// `count` models `[A B]` consistent with every sample of `ds` (exact
/// membership), drawn along random directions from the true system out to
/// the boundary of the consistency set found by bisection.
pub fn exact_members(
    ab_true: &DMatrix<f64>,
    ds: &dd_iss::data::Dataset,
    lib: &dd_iss::poly::FunctionLibrary,
    count: usize,
    seed: u64,
) -> Vec<DMatrix<f64>> {
    use dd_iss::consistency::membership_exact;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inside = |m: &DMatrix<f64>| membership_exact(m, ds, lib).unwrap();
    assert!(inside(ab_true), "true system must be consistent with its own data");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let dir = DMatrix::from_fn(ab_true.nrows(), ab_true.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let dir = &dir / dir.norm();
        let (mut lo, mut hi) = (0.0, 1.0);
        while inside(&(ab_true + &dir * hi)) {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if inside(&(ab_true + &dir * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = lo * rng.random_range(0.5..1.0);
        out.push(ab_true + &dir * t);
    }
    out
}
