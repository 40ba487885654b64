//! Ground-truth simulation and noisy data collection.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{FunctionLibrary, PolyError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise sample {index} at t = {t} has |d|^2 = {energy} > delta = {delta}")]
    NoiseBound { index: usize, t: f64, energy: f64, delta: f64 },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("sample time {0} is outside the simulated trajectory")]
    OutOfRange(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// `ẋ = A⋆ Z(x) + B⋆ W(x) u`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrueSystem {
    pub a_star: DMatrix<f64>,
    pub b_star: DMatrix<f64>,
    pub library: FunctionLibrary,
}

impl TrueSystem {
    pub fn new(a_star: DMatrix<f64>, b_star: DMatrix<f64>, library: FunctionLibrary) -> Result<Self, DataError> {
        let sys = TrueSystem { a_star, b_star, library };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.library.nvars;
        if self.a_star.nrows() != n || self.a_star.ncols() != self.library.n_z() {
            return Err(DataError::Dimension(format!(
                "A* is {}x{}, expected {}x{}",
                self.a_star.nrows(),
                self.a_star.ncols(),
                n,
                self.library.n_z()
            )));
        }
        if self.b_star.nrows() != n || self.b_star.ncols() != self.library.n_w() {
            return Err(DataError::Dimension(format!(
                "B* is {}x{}, expected {}x{}",
                self.b_star.nrows(),
                self.b_star.ncols(),
                n,
                self.library.n_w()
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.library.nvars
    }

    pub fn m(&self) -> usize {
        self.library.n_inputs()
    }

    /// `(A⋆, B⋆)` side by side.
    pub fn ab(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, self.a_star.ncols() + self.b_star.ncols());
        out.columns_mut(0, self.a_star.ncols()).copy_from(&self.a_star);
        out.columns_mut(self.a_star.ncols(), self.b_star.ncols()).copy_from(&self.b_star);
        out
    }

    /// Right-hand side with input `u` and additive disturbance `d`.
    pub fn rhs(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<DVector<f64>, DataError> {
        let z = self.library.regressor(x, u)?;
        Ok(self.ab() * z + DVector::from_column_slice(d))
    }
}

/// Recipe for an exogenous signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    /// Knots drawn i.i.d. Gaussian every `knot_spacing`, linearly interpolated.
    InterpolatedGaussian { mean: f64, variance: f64, knot_spacing: f64 },
    /// Knots drawn uniformly from the ball of `radius`, linearly interpolated.
    InterpolatedUniformBall { radius: f64, knot_spacing: f64 },
    Constant { value: Vec<f64> },
    /// Piecewise-linear through the given samples, constant outside them.
    CustomSamples { times: Vec<f64>, values: Vec<Vec<f64>> },
    Zero,
}

impl SignalSpec {
    /// Draws a concrete signal of dimension `dim` on `[0, horizon]`.
    pub fn realize<R: Rng>(&self, dim: usize, horizon: f64, rng: &mut R) -> Result<Signal, DataError> {
        let knot_times = |spacing: f64| -> Result<Vec<f64>, DataError> {
            if !(spacing > 0.0) {
                return Err(DataError::Invalid("knot spacing must be positive".into()));
            }
            let count = (horizon / spacing).ceil() as usize + 1;
            Ok((0..count).map(|k| k as f64 * spacing).collect())
        };
        match self {
            SignalSpec::InterpolatedGaussian { mean, variance, knot_spacing } => {
                if !(*variance >= 0.0) {
                    return Err(DataError::Invalid("variance must be nonnegative".into()));
                }
                let normal = Normal::new(*mean, variance.sqrt()).map_err(|e| DataError::Invalid(e.to_string()))?;
                let times = knot_times(*knot_spacing)?;
                let values = times.iter().map(|_| DVector::from_fn(dim, |_, _| normal.sample(rng))).collect();
                Signal::new(times, values)
            }
            SignalSpec::InterpolatedUniformBall { radius, knot_spacing } => {
                if !(*radius >= 0.0) {
                    return Err(DataError::Invalid("ball radius must be nonnegative".into()));
                }
                let times = knot_times(*knot_spacing)?;
                let values = times.iter().map(|_| uniform_ball(dim, *radius, rng)).collect();
                Signal::new(times, values)
            }
            SignalSpec::Constant { value } => {
                if value.len() != dim {
                    return Err(DataError::Dimension(format!("constant signal has {} entries, expected {dim}", value.len())));
                }
                Signal::new(vec![0.0], vec![DVector::from_column_slice(value)])
            }
            SignalSpec::CustomSamples { times, values } => {
                if values.iter().any(|v| v.len() != dim) {
                    return Err(DataError::Dimension(format!("custom samples must have dimension {dim}")));
                }
                Signal::new(times.clone(), values.iter().map(|v| DVector::from_column_slice(v)).collect())
            }
            SignalSpec::Zero => Signal::new(vec![0.0], vec![DVector::zeros(dim)]),
        }
    }
}

/// Uniform sample from the Euclidean ball of `radius` in `dim` dimensions.
pub fn uniform_ball<R: Rng>(dim: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    if dim == 0 {
        return DVector::zeros(0);
    }
    loop {
        let g: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let norm = g.norm();
        if norm > 0.0 {
            let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
            let v = g * (radius * r / norm);
            // guard against the last-ulp overshoot of the rescaling
            let vn = v.norm();
            return if vn > radius { v * (radius / vn) } else { v };
        }
    }
}

/// Piecewise-linear signal through knots, held constant outside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl Signal {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, DataError> {
        if times.is_empty() || times.len() != values.len() {
            return Err(DataError::Invalid("signal needs matching, nonempty times and values".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DataError::Invalid("signal knot times must be strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(DataError::Invalid("signal values must share a dimension".into()));
        }
        Ok(Signal { times, values })
    }

    pub fn zero(dim: usize) -> Self {
        Signal { times: vec![0.0], values: vec![DVector::zeros(dim)] }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.values[0].clone();
        }
        if k == self.times.len() {
            return self.values[k - 1].clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let s = (t - t0) / (t1 - t0);
        &self.values[k - 1] * (1.0 - s) + &self.values[k] * s
    }
}

/// States on a uniform time grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub step: f64,
    pub diverged: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// One classical Runge–Kutta step of length `h`.
pub fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Fixed-step RK4 on `[0, horizon]`. Stops early, flagging divergence, once
/// the state norm exceeds `guard` or becomes non-finite.
pub fn rk4_integrate<F>(f: F, x0: &DVector<f64>, horizon: f64, step: f64, guard: f64) -> Result<Trajectory, DataError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(step > 0.0) || !(horizon >= step) {
        return Err(DataError::Invalid(format!("need step > 0 and horizon >= step, got step {step}, horizon {horizon}")));
    }
    let steps = (horizon / step).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0.clone();
    let mut diverged = false;
    for k in 0..steps {
        let t = k as f64 * step;
        x = rk4_step(&f, t, &x, step);
        let nrm = x.norm();
        if !nrm.is_finite() || nrm > guard {
            diverged = true;
            break;
        }
        times.push((k + 1) as f64 * step);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states, step, diverged })
}

pub const DEFAULT_GUARD: f64 = 1e6;

/// Open-loop simulation of `ẋ = A⋆Z(x) + B⋆W(x)u(t) + d(t)`.
pub fn integrate_trajectory(
    sys: &TrueSystem,
    x0: &[f64],
    u: &Signal,
    d: &Signal,
    horizon: f64,
    step: f64,
) -> Result<Trajectory, DataError> {
    if x0.len() != sys.n() || u.dim() != sys.m() || d.dim() != sys.n() {
        return Err(DataError::Dimension("initial state, input or disturbance size".into()));
    }
    let field = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        sys.rhs(x.as_slice(), u.at(t).as_slice(), d.at(t).as_slice())
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
    };
    rk4_integrate(field, &DVector::from_column_slice(x0), horizon, step, DEFAULT_GUARD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub xdot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub delta: f64,
    pub multi_trajectory: bool,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, delta: f64) -> Result<Self, DataError> {
        let ds = Dataset { samples, delta, multi_trajectory: false };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::Invalid("dataset must contain at least one sample".into()));
        }
        if !(self.delta > 0.0) {
            return Err(DataError::Invalid("noise bound delta must be positive".into()));
        }
        let (n, m) = (self.samples[0].x.len(), self.samples[0].u.len());
        for s in &self.samples {
            if s.x.len() != n || s.xdot.len() != n || s.u.len() != m {
                return Err(DataError::Dimension("samples disagree on state or input size".into()));
            }
            if !s.t.is_finite() || s.x.iter().chain(&s.u).chain(&s.xdot).any(|v| !v.is_finite()) {
                return Err(DataError::Invalid("non-finite sample value".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn m(&self) -> usize {
        self.samples[0].u.len()
    }

    /// Concatenates datasets collected under the same noise bound.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset, DataError> {
        let Some(first) = parts.first() else {
            return Err(DataError::Invalid("nothing to concatenate".into()));
        };
        let delta = first.delta;
        if parts.iter().any(|p| p.delta != delta) {
            return Err(DataError::Invalid("datasets use different noise bounds".into()));
        }
        let multi = parts.len() > 1 || parts.iter().any(|p| p.multi_trajectory);
        let samples = parts.into_iter().flat_map(|p| p.samples).collect();
        let ds = Dataset { samples, delta, multi_trajectory: multi };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let (n, m) = (self.n(), self.m());
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=n).map(|i| format!("xdot{i}")));
        wr.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![fmt_f64(s.t)];
            rec.extend(s.x.iter().chain(&s.u).chain(&s.xdot).map(|v| fmt_f64(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses the CSV layout written by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(r: R, delta: f64) -> Result<Dataset, DataError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names.first() != Some(&"t") {
            return Err(DataError::Invalid("first column must be t".into()));
        }
        let count = |prefix: &str| names.iter().filter(|h| is_indexed(h, prefix)).count();
        let (n, m) = (count("x"), count("u"));
        let nd = count("xdot");
        let mut expected = vec!["t".to_string()];
        expected.extend((1..=n).map(|i| format!("x{i}")));
        expected.extend((1..=m).map(|i| format!("u{i}")));
        expected.extend((1..=n).map(|i| format!("xdot{i}")));
        if nd != n || names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(DataError::Invalid(format!("unexpected header: {}", names.join(","))));
        }
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 1 + 2 * n + m {
                return Err(DataError::Invalid(format!("row has {} fields, expected {}", rec.len(), 1 + 2 * n + m)));
            }
            let vals = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| DataError::Invalid(format!("bad number {f:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            samples.push(Sample {
                t: vals[0],
                x: vals[1..1 + n].to_vec(),
                u: vals[1 + n..1 + n + m].to_vec(),
                xdot: vals[1 + n + m..].to_vec(),
            });
        }
        Dataset::new(samples, delta)
    }
}

fn is_indexed(h: &str, prefix: &str) -> bool {
    h.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

/// Shortest representation that round-trips exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub delta: f64,
    pub seed: u64,
    pub multi_trajectory: bool,
    pub samples: usize,
    pub config_hash: String,
    pub csv_sha256: String,
}

pub fn write_dataset(ds: &Dataset, csv_path: &Path, meta_path: &Path, seed: u64, config_hash: &str) -> Result<DatasetMeta, DataError> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    std::fs::write(csv_path, &buf)?;
    let meta = DatasetMeta {
        delta: ds.delta,
        seed,
        multi_trajectory: ds.multi_trajectory,
        samples: ds.len(),
        config_hash: config_hash.to_string(),
        csv_sha256: crate::sha256_hex(&buf),
    };
    std::fs::write(meta_path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_dataset(csv_path: &Path, meta_path: &Path) -> Result<(Dataset, DatasetMeta), DataError> {
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
    let bytes = std::fs::read(csv_path)?;
    let mut ds = Dataset::read_csv(bytes.as_slice(), meta.delta)?;
    ds.multi_trajectory = meta.multi_trajectory;
    Ok((ds, meta))
}

/// State at an arbitrary time inside the trajectory: the preceding grid
/// state advanced by one partial RK4 step.
fn state_at<F>(traj: &Trajectory, field: &F, t: f64) -> Result<DVector<f64>, DataError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let last = *traj.times.last().unwrap();
    if t < -1e-12 || t > last + 1e-9 {
        return Err(DataError::OutOfRange(t));
    }
    let k = ((t / traj.step).floor() as usize).min(traj.states.len() - 1);
    let tk = traj.times[k];
    let h = t - tk;
    if h.abs() <= 1e-12 * traj.step.max(1.0) {
        return Ok(traj.states[k].clone());
    }
    Ok(rk4_step(field, tk, &traj.states[k], h))
}

/// Records `(t, x, u, ẋ)` at each sample time, the derivative being the
/// exact right-hand side plus the disturbance realization.
pub fn collect_dataset(
    sys: &TrueSystem,
    traj: &Trajectory,
    u: &Signal,
    d: &Signal,
    sample_times: &[f64],
    delta: f64,
) -> Result<Dataset, DataError> {
    if !(delta > 0.0) {
        return Err(DataError::Invalid("noise bound delta must be positive".into()));
    }
    let field = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        sys.rhs(x.as_slice(), u.at(t).as_slice(), d.at(t).as_slice())
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN))
    };
    let mut samples = Vec::with_capacity(sample_times.len());
    for (i, &t) in sample_times.iter().enumerate() {
        let dv = d.at(t);
        let energy = dv.norm_squared();
        if energy > delta {
            return Err(DataError::NoiseBound { index: i, t, energy, delta });
        }
        let x = state_at(traj, &field, t)?;
        let uv = u.at(t);
        let xdot = sys.rhs(x.as_slice(), uv.as_slice(), dv.as_slice())?;
        samples.push(Sample { t, x: x.as_slice().to_vec(), u: uv.as_slice().to_vec(), xdot: xdot.as_slice().to_vec() });
    }
    Dataset::new(samples, delta)
}

/// `T` times spread uniformly over `[0, horizon]`, both ends included.
pub fn uniform_sample_times(horizon: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|i| horizon * i as f64 / (count - 1) as f64).collect(),
    }
}

/// `Z₀` (N×T) and `W₀` (M×T): column `i` holds `Z(x_i)` and `W(x_i)u_i`.
pub fn regressor_matrices(ds: &Dataset, lib: &FunctionLibrary) -> Result<(DMatrix<f64>, DMatrix<f64>), DataError> {
    let t = ds.len();
    let (nz, nw) = (lib.n_z(), lib.n_w());
    let mut z0 = DMatrix::zeros(nz, t);
    let mut w0 = DMatrix::zeros(nw, t);
    for (i, s) in ds.samples.iter().enumerate() {
        let col = lib.regressor(&s.x, &s.u)?;
        z0.column_mut(i).copy_from(&col.rows(0, nz));
        w0.column_mut(i).copy_from(&col.rows(nz, nw));
    }
    Ok((z0, w0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::poly::{PolyMatrix, Polynomial};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_decay() -> TrueSystem {
        let lib = FunctionLibrary::new(1, vec![Polynomial::var(1, 0)], PolyMatrix::identity(1, 1)).unwrap();
        TrueSystem::new(DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1), lib).unwrap()
    }

    #[test]
    fn zero_field_keeps_state() {
        let mut sys = benchmark::system();
        sys.a_star.fill(0.0);
        sys.b_star.fill(0.0);
        let traj = integrate_trajectory(&sys, &[2.0, -2.0], &Signal::zero(1), &Signal::zero(2), 1.0, 1e-2).unwrap();
        assert!(traj.states.iter().all(|x| (x - DVector::from_vec(vec![2.0, -2.0])).amax() == 0.0));
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = scalar_decay();
        let traj = integrate_trajectory(&sys, &[1.0], &Signal::zero(1), &Signal::zero(1), 1.0, 1e-3).unwrap();
        assert_eq!(traj.times.len(), 1001);
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn divergence_is_flagged() {
        let mut sys = scalar_decay();
        sys.a_star[(0, 0)] = 50.0;
        let traj = integrate_trajectory(&sys, &[1.0], &Signal::zero(1), &Signal::zero(1), 10.0, 1e-2).unwrap();
        assert!(traj.diverged);
        assert!(traj.times.len() < 1001);
    }

    #[test]
    fn rk4_is_fourth_order_on_reference_system() {
        let sys = benchmark::system();
        let u = Signal::zero(1);
        let d = Signal::zero(2);
        let horizon = 0.5;
        let end = |h: f64| integrate_trajectory(&sys, &[2.0, -2.0], &u, &d, horizon, h).unwrap().final_state().clone();
        let h = 0.02;
        let reference = end(h / 16.0);
        let e1 = (end(h) - &reference).norm();
        let e2 = (end(h / 2.0) - &reference).norm();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn ball_signal_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SignalSpec::InterpolatedUniformBall { radius: 1.0, knot_spacing: 0.05 };
        let sig = spec.realize(2, 5.0, &mut rng).unwrap();
        for _ in 0..1000 {
            let t: f64 = rng.random_range(-1.0..6.0);
            assert!(sig.at(t).norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gaussian_signal_interpolates_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = SignalSpec::InterpolatedGaussian { mean: 0.0, variance: 4.0, knot_spacing: 0.1 };
        let sig = spec.realize(1, 1.0, &mut rng).unwrap();
        let a = sig.at(0.1)[0];
        let b = sig.at(0.2)[0];
        assert!((sig.at(0.15)[0] - 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_data_matches_true_system() {
        let sys = benchmark::system();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = SignalSpec::InterpolatedGaussian { mean: 0.0, variance: 1.0, knot_spacing: 0.1 }.realize(1, 1.0, &mut rng).unwrap();
        let d = Signal::zero(2);
        let traj = integrate_trajectory(&sys, &[2.0, -2.0], &u, &d, 1.0, 1e-3).unwrap();
        let ds = collect_dataset(&sys, &traj, &u, &d, &uniform_sample_times(1.0, 50), 1e3).unwrap();
        for s in &ds.samples {
            let pred = sys.rhs(&s.x, &s.u, &[0.0, 0.0]).unwrap();
            assert!((pred - DVector::from_column_slice(&s.xdot)).norm() < 1e-12);
        }
    }

    #[test]
    fn off_grid_sample_uses_partial_step() {
        let sys = scalar_decay();
        let u = Signal::zero(1);
        let d = Signal::zero(1);
        let traj = integrate_trajectory(&sys, &[1.0], &u, &d, 1.0, 1e-2).unwrap();
        let ds = collect_dataset(&sys, &traj, &u, &d, &[0.123456], 1.0).unwrap();
        assert!((ds.samples[0].x[0] - (-0.123456f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn noise_bound_is_closed() {
        let sys = benchmark::system();
        let u = Signal::zero(1);
        let traj = integrate_trajectory(&sys, &[2.0, -2.0], &u, &Signal::zero(2), 0.1, 1e-3).unwrap();
        let d = SignalSpec::Constant { value: vec![1.0, 0.0] }.realize(2, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(collect_dataset(&sys, &traj, &u, &d, &[0.05], 1.0).is_ok());
        let loud = SignalSpec::Constant { value: vec![1.0, 0.1] }.realize(2, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(collect_dataset(&sys, &traj, &u, &loud, &[0.05], 1.0), Err(DataError::NoiseBound { .. })));
    }

    #[test]
    fn regressor_columns() {
        let lib = FunctionLibrary::new(1, vec![Polynomial::var(1, 0)], PolyMatrix::identity(1, 1)).unwrap();
        let ds = Dataset::new(vec![Sample { t: 0.0, x: vec![3.0], u: vec![0.0], xdot: vec![0.0] }], 1.0).unwrap();
        let (z0, _) = regressor_matrices(&ds, &lib).unwrap();
        assert_eq!(z0[(0, 0)], 3.0);

        let sys = benchmark::system();
        let ds = Dataset::new(vec![Sample { t: 0.0, x: vec![1.0, 1.0], u: vec![2.0], xdot: vec![0.0, 0.0] }], 1.0).unwrap();
        let (z0, w0) = regressor_matrices(&ds, &sys.library).unwrap();
        assert_eq!(z0.column(0).as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(w0[(0, 0)], 2.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::new(
            vec![
                Sample { t: 0.0, x: vec![2.0, -2.0], u: vec![0.1], xdot: vec![1.0 / 3.0, -7.25] },
                Sample { t: 0.5, x: vec![1e-17, 3.5], u: vec![-0.2], xdot: vec![0.0, 1e300] },
            ],
            1.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,u1,xdot1,xdot2\n"));
        let back = Dataset::read_csv(buf.as_slice(), 1.0).unwrap();
        assert_eq!(back, ds);
        assert!(Dataset::read_csv("t,x1,u1,xdot1\n0,1,oops,2\n".as_bytes(), 1.0).is_err());
        assert!(Dataset::read_csv("t,x1,u1\n0,1,2\n".as_bytes(), 1.0).is_err());
    }
}
