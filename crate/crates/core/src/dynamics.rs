//! Exact simulation of gradient flow / OU dynamics under renewal resetting.
//!
//! Between resets each eigen-coordinate evolves as an independent-drift OU
//! process, so conditional transitions are Gaussian with closed-form mean
//! and covariance. Nothing here discretizes the SDE.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_nonnegative, ensure_positive, Error, Result};
use crate::laws::ResetLaw;
use crate::linalg::{psd_sqrt, symmetric_eigen};
use crate::parallel::Execution;
use crate::spectral::SpectralModel;

/// Snapshots per independently seeded RNG stream in a batch.
pub const SNAPSHOT_CHUNK: usize = 1024;

/// Additive gradient-noise covariance, stored in the eigenbasis of `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma_tilde: DMatrix<f64>,
    isotropic: Option<f64>,
}

impl NoiseModel {
    pub fn zero(d: usize) -> Self {
        NoiseModel { sigma_tilde: DMatrix::zeros(d, d), isotropic: Some(0.0) }
    }

    /// `Σ = level · I` (identical in every orthonormal basis).
    pub fn isotropic(level: f64, d: usize) -> Result<Self> {
        ensure_nonnegative("noise level", level)?;
        Ok(NoiseModel { sigma_tilde: DMatrix::identity(d, d) * level, isotropic: Some(level) })
    }

    /// Noise covariance given directly in the eigenbasis.
    pub fn from_eigenbasis(sigma_tilde: DMatrix<f64>) -> Result<Self> {
        let d = sigma_tilde.nrows();
        if sigma_tilde.ncols() != d {
            return Err(Error::Input("noise covariance must be square".into()));
        }
        if sigma_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("noise covariance has non-finite entries".into()));
        }
        let asym = (&sigma_tilde - sigma_tilde.transpose()).amax();
        if asym > 1e-12 * (1.0 + sigma_tilde.amax()) {
            return Err(Error::Input(format!("noise covariance is not symmetric (asymmetry {asym:.3e})")));
        }
        let eig = symmetric_eigen(&sigma_tilde)?;
        let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_tilde = if min < -1e-10 {
            return Err(Error::Input(format!("noise covariance is not PSD (eigenvalue {min:.3e})")));
        } else if min < 0.0 {
            let clipped = eig.values.map(|l| l.max(0.0));
            &eig.vectors * DMatrix::from_diagonal(&clipped) * eig.vectors.transpose()
        } else {
            sigma_tilde
        };
        Ok(NoiseModel { sigma_tilde, isotropic: None })
    }

    /// Noise covariance given in original coordinates, rotated into the model's eigenbasis.
    pub fn from_original(model: &SpectralModel, sigma: &DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != model.dim() || sigma.ncols() != model.dim() {
            return Err(Error::Input("noise covariance dimension does not match the model".into()));
        }
        let mut rotated = model.matrix_to_eigen(sigma);
        rotated = (&rotated + rotated.transpose()) * 0.5;
        NoiseModel::from_eigenbasis(rotated)
    }

    pub fn sigma_tilde(&self) -> &DMatrix<f64> {
        &self.sigma_tilde
    }

    pub fn isotropic_level(&self) -> Option<f64> {
        self.isotropic
    }

    pub fn dim(&self) -> usize {
        self.sigma_tilde.nrows()
    }

    pub fn diag(&self) -> Vec<f64> {
        self.sigma_tilde.diagonal().iter().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_tilde.iter().all(|&v| v == 0.0)
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.sigma_tilde[(i, j)] == 0.0))
    }

    fn check_dim(&self, model: &SpectralModel) -> Result<()> {
        if self.dim() != model.dim() {
            return Err(Error::Input(format!(
                "noise model has dimension {}, model has {}",
                self.dim(),
                model.dim()
            )));
        }
        Ok(())
    }
}

/// `(1 - e^{-s a}) / s`, equal to `a` in the limit `s → 0`.
pub(crate) fn relaxation_integral(s: f64, a: f64) -> f64 {
    let x = s * a;
    if x.abs() < 1e-12 {
        a * (1.0 - 0.5 * x)
    } else {
        -(-x).exp_m1() / s
    }
}

/// Gradient flow from zero: eigen-coordinate `i` is `(1 - e^{-μ_i t}) w̃*_i`.
pub fn gradient_flow_state(model: &SpectralModel, t: f64) -> Result<DVector<f64>> {
    ensure_nonnegative("t", t)?;
    let mu = model.mu();
    Ok(DVector::from_fn(model.dim(), |i, _| -(-mu[i] * t).exp_m1() * model.w_star_tilde()[i]))
}

/// Mean of the Poisson-reset process at time `t` from eigen-coordinates `m0`.
pub fn mean_transient(model: &SpectralModel, r: f64, t: f64, m0: &DVector<f64>) -> Result<DVector<f64>> {
    ensure_positive("r", r)?;
    ensure_nonnegative("t", t)?;
    if m0.len() != model.dim() {
        return Err(Error::Input("initial mean has wrong dimension".into()));
    }
    let mu = model.mu();
    let b = model.b_tilde();
    Ok(DVector::from_fn(model.dim(), |i, _| {
        let k = mu[i] + r;
        let decay = (-k * t).exp();
        decay * m0[i] + (-(-k * t).exp_m1()) * b[i] / k
    }))
}

/// OU noise covariance accumulated over an age `a`, in the eigenbasis:
/// `Σ̃_ij (1 - e^{-(μ_i+μ_j) a}) / (μ_i + μ_j)`.
pub fn ou_conditional_covariance(model: &SpectralModel, noise: &NoiseModel, a: f64) -> Result<DMatrix<f64>> {
    ensure_nonnegative("age", a)?;
    noise.check_dim(model)?;
    let mu = model.mu();
    let s = noise.sigma_tilde();
    Ok(DMatrix::from_fn(model.dim(), model.dim(), |i, j| {
        s[(i, j)] * relaxation_integral(mu[i] + mu[j], a)
    }))
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Gaussian noise with covariance `C̃(a)`; diagonal noise skips the matrix root.
fn ou_noise<R: Rng + ?Sized>(model: &SpectralModel, noise: &NoiseModel, a: f64, rng: &mut R) -> Result<DVector<f64>> {
    let d = model.dim();
    if noise.is_zero() || a == 0.0 {
        return Ok(DVector::zeros(d));
    }
    let z = standard_normals(rng, d);
    if noise.is_diagonal() {
        let mu = model.mu();
        let s = noise.sigma_tilde();
        return Ok(DVector::from_fn(d, |i, _| {
            (s[(i, i)] * relaxation_integral(2.0 * mu[i], a)).max(0.0).sqrt() * z[i]
        }));
    }
    let root = psd_sqrt(&ou_conditional_covariance(model, noise, a)?)?;
    Ok(root * z)
}

/// Exact draw of the state (eigen-coordinates) at age `a` after a reset to zero.
pub fn ou_conditional_sample<R: Rng + ?Sized>(
    model: &SpectralModel,
    noise: &NoiseModel,
    a: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mean = gradient_flow_state(model, a)?;
    noise.check_dim(model)?;
    Ok(mean + ou_noise(model, noise, a, rng)?)
}

/// One equilibrium snapshot: a random equilibrium age, then the exact OU state at that age.
pub fn equilibrium_snapshot<R: Rng + ?Sized>(
    model: &SpectralModel,
    law: &ResetLaw,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let age = law.sample_equilibrium_age(rng);
    ou_conditional_sample(model, noise, age, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMeta {
    pub count: usize,
    pub chunks: usize,
    pub elapsed: Duration,
}

/// Equilibrium snapshots in eigen-coordinates, one per row.
#[derive(Debug, Clone)]
pub struct SnapshotBatch {
    pub samples: DMatrix<f64>,
    pub seed: u64,
    pub law: ResetLaw,
    pub meta: BatchMeta,
}

/// Draws `count` i.i.d. equilibrium snapshots.
///
/// Chunk `c` of [`SNAPSHOT_CHUNK`] rows uses ChaCha stream `c` of `seed`, so
/// the batch is identical under any execution strategy or thread count.
pub fn snapshot_batch(
    model: &SpectralModel,
    law: &ResetLaw,
    noise: &NoiseModel,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<SnapshotBatch> {
    if count == 0 {
        return Err(Error::Parameter("snapshot count must be at least 1".into()));
    }
    noise.check_dim(model)?;
    let start = Instant::now();
    let d = model.dim();
    let chunks = count.div_ceil(SNAPSHOT_CHUNK);
    let blocks = exec.try_map_indexed(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let rows = SNAPSHOT_CHUNK.min(count - c * SNAPSHOT_CHUNK);
        (0..rows).map(|_| equilibrium_snapshot(model, law, noise, &mut rng)).collect::<Result<Vec<_>>>()
    })?;
    let mut samples = DMatrix::zeros(count, d);
    for (row, x) in blocks.iter().flatten().enumerate() {
        samples.set_row(row, &x.transpose());
    }
    Ok(SnapshotBatch {
        samples,
        seed,
        law: *law,
        meta: BatchMeta { count, chunks, elapsed: start.elapsed() },
    })
}

/// A simulated path on a regular grid, states in original coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Exact reset epochs in `(0, horizon]`.
    pub reset_times: Vec<f64>,
}

/// Simulates reset OU dynamics from `w = 0` at `t = 0` and records the state at
/// `0, dt, 2dt, …, horizon`. Resets happen at their sampled epochs, not on the grid.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    model: &SpectralModel,
    law: &ResetLaw,
    noise: &NoiseModel,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    ensure_positive("dt", dt)?;
    ensure_positive("horizon", horizon)?;
    if horizon < dt {
        return Err(Error::Parameter("horizon must be at least dt".into()));
    }
    noise.check_dim(model)?;
    let d = model.dim();
    let mu = model.mu().clone();
    let target = model.w_star_tilde().clone();
    let steps = (horizon / dt + 1e-9).floor() as usize;

    let advance = |x: &mut DVector<f64>, span: f64, rng: &mut R| -> Result<()> {
        if span <= 0.0 {
            return Ok(());
        }
        for i in 0..d {
            let decay = (-mu[i] * span).exp();
            x[i] = decay * x[i] + (1.0 - decay) * target[i];
        }
        *x += ou_noise(model, noise, span, rng)?;
        Ok(())
    };

    let mut x = DVector::zeros(d);
    let mut now = 0.0;
    let mut next_reset = law.sample_interval(rng);
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut reset_times = Vec::new();
    for k in 0..=steps {
        let t = k as f64 * dt;
        while next_reset <= t {
            advance(&mut x, next_reset - now, rng)?;
            x.fill(0.0);
            reset_times.push(next_reset);
            now = next_reset;
            next_reset += law.sample_interval(rng);
        }
        advance(&mut x, t - now, rng)?;
        now = t;
        times.push(t);
        states.push(model.to_original(&x));
    }
    Ok(Trajectory { times, states, reset_times })
}

/// `r ∫₀^∞ e^{-ra} β(a) da` by the trapezoid rule, in original coordinates.
///
/// The integral is truncated where `e^{-ra} ≤ 1e-12`. The step makes the
/// leading Euler-Maclaurin error term `h² |f'(0)| / 12` at most `1e-8`.
pub fn laplace_average_quadrature(model: &SpectralModel, r: f64) -> Result<DVector<f64>> {
    ensure_positive("r", r)?;
    let a_max = (1e12_f64).ln() / r;
    let mu = model.mu();
    let w = model.w_star_tilde();
    let slope = (0..model.dim()).map(|i| r * mu[i] * w[i].abs()).fold(0.0, f64::max);
    let h_target = if slope > 0.0 { (12.0 * 1e-8 / slope).sqrt() } else { a_max };
    let steps = ((a_max / h_target).ceil() as usize).clamp(16, 50_000_000);
    let h = a_max / steps as f64;

    let coords = DVector::from_fn(model.dim(), |i, _| {
        let f = |a: f64| r * (-r * a).exp() * -(-mu[i] * a).exp_m1() * w[i];
        let inner: f64 = (1..steps).map(|k| f(k as f64 * h)).sum();
        h * (0.5 * (f(0.0) + f(a_max)) + inner)
    });
    Ok(model.to_original(&coords))
}

/// Sample moments of a batch of row vectors.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    /// `sqrt(diag(cov) / m)`.
    pub se_mean: DVector<f64>,
    /// Standard error of each covariance entry from the spread of centered products.
    pub se_cov: DMatrix<f64>,
    pub count: usize,
}

pub fn empirical_moments(samples: &DMatrix<f64>) -> Result<EmpiricalMoments> {
    let (m, d) = samples.shape();
    if m < 2 {
        return Err(Error::Parameter(format!("need at least 2 samples, got {m}")));
    }
    let mf = m as f64;
    let mean = DVector::from_fn(d, |j, _| samples.column(j).sum() / mf);
    let mut cov = DMatrix::zeros(d, d);
    let mut se_cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let prods: Vec<f64> =
                (0..m).map(|k| (samples[(k, i)] - mean[i]) * (samples[(k, j)] - mean[j])).collect();
            let s = prods.iter().sum::<f64>();
            let c = s / (mf - 1.0);
            let pm = s / mf;
            let pv = prods.iter().map(|p| (p - pm) * (p - pm)).sum::<f64>() / (mf - 1.0);
            let se = (pv / mf).sqrt();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            se_cov[(i, j)] = se;
            se_cov[(j, i)] = se;
        }
    }
    let se_mean = DVector::from_fn(d, |i, _| (cov[(i, i)] / mf).sqrt());
    Ok(EmpiricalMoments { mean, cov, se_mean, se_cov, count: m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{min_norm_ols, ridge_closed_form};
    use nalgebra::{dmatrix, dvector};

    fn scalar(mu: f64, b: f64) -> SpectralModel {
        SpectralModel::from_normal_equations(dmatrix![mu], dvector![b], None).unwrap()
    }

    fn small_model() -> SpectralModel {
        SpectralModel::from_normal_equations(
            dmatrix![2.0, 0.3, 0.0; 0.3, 1.0, 0.1; 0.0, 0.1, 0.5],
            dvector![1.0, -0.5, 0.8],
            None,
        )
        .unwrap()
    }

    #[test]
    fn gradient_flow_limits() {
        let m = small_model();
        assert!(gradient_flow_state(&m, 0.0).unwrap().iter().all(|&v| v == 0.0));
        let tmin = m.mu().min();
        let late = gradient_flow_state(&m, 1e6 / tmin).unwrap();
        assert!((late - m.w_star_tilde()).amax() < 1e-8);
        let s = gradient_flow_state(&scalar(1.0, 1.0), std::f64::consts::LN_2).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!(gradient_flow_state(&m, -1.0).is_err());
    }

    #[test]
    fn mean_transient_limits() {
        let m = small_model();
        let m0 = dvector![0.3, -0.2, 1.0];
        assert_eq!(mean_transient(&m, 0.7, 0.0, &m0).unwrap(), m0);
        let late = m.to_original(&mean_transient(&m, 0.7, 1e4, &m0).unwrap());
        let ridge = ridge_closed_form(&m, 0.7).unwrap();
        assert!((late - ridge).amax() < 1e-12);
        let s = mean_transient(&scalar(1.0, 2.0), 1.0, std::f64::consts::LN_2 / 2.0, &dvector![0.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conditional_sample_edge_cases() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseModel::isotropic(0.4, 3).unwrap();
        assert!(ou_conditional_sample(&m, &noise, 0.0, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        let quiet = ou_conditional_sample(&m, &NoiseModel::zero(3), 1.3, &mut rng).unwrap();
        assert_eq!(quiet, gradient_flow_state(&m, 1.3).unwrap());
    }

    #[test]
    fn stationary_ou_variance() {
        let m = scalar(1.0, 0.0);
        let noise = NoiseModel::isotropic(1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let xs = DMatrix::from_fn(n, 1, |_, _| ou_conditional_sample(&m, &noise, 50.0, &mut rng).unwrap()[0]);
        let mom = empirical_moments(&xs).unwrap();
        assert!((mom.cov[(0, 0)] - 0.5).abs() < 3.0 * mom.se_cov[(0, 0)]);
    }

    #[test]
    fn full_noise_matches_diagonal_shortcut_in_distribution() {
        let m = small_model();
        let sigma = dmatrix![0.5, 0.1, 0.0; 0.1, 0.4, 0.05; 0.0, 0.05, 0.3];
        let noise = NoiseModel::from_eigenbasis(sigma).unwrap();
        assert!(!noise.is_diagonal());
        let c = ou_conditional_covariance(&m, &noise, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60_000;
        let mut xs = DMatrix::zeros(n, 3);
        for k in 0..n {
            let x = ou_conditional_sample(&m, &noise, 0.8, &mut rng).unwrap() - gradient_flow_state(&m, 0.8).unwrap();
            xs.set_row(k, &x.transpose());
        }
        let mom = empirical_moments(&xs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((mom.cov[(i, j)] - c[(i, j)]).abs() < 4.0 * mom.se_cov[(i, j)]);
            }
        }
    }

    #[test]
    fn batch_is_deterministic_across_strategies() {
        let m = small_model();
        let law = ResetLaw::gamma(3.0, 1.0).unwrap();
        let noise = NoiseModel::isotropic(0.2, 3).unwrap();
        let a = snapshot_batch(&m, &law, &noise, 3000, 9, Execution::Sequential).unwrap();
        let b = snapshot_batch(&m, &law, &noise, 3000, 9, Execution::Parallel).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.meta.chunks, 3);
        let c = snapshot_batch(&m, &law, &noise, 3000, 10, Execution::Parallel).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn trajectory_without_resets_reaches_ols() {
        let m = small_model();
        let law = ResetLaw::deterministic(1e12).unwrap();
        let horizon = 20.0 / m.mu().min() + 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = simulate_trajectory(&m, &law, &NoiseModel::zero(3), horizon, 0.5, &mut rng).unwrap();
        assert!(path.reset_times.is_empty());
        assert!((path.states.last().unwrap() - min_norm_ols(&m)).amax() < 1e-6);
        assert_eq!(path.times[0], 0.0);
        assert!(path.states[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_resets_are_exact_epochs() {
        let m = small_model();
        let law = ResetLaw::deterministic(0.37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = simulate_trajectory(&m, &law, &NoiseModel::zero(3), 2.0, 0.1, &mut rng).unwrap();
        assert_eq!(path.reset_times.len(), 5);
        for (k, t) in path.reset_times.iter().enumerate() {
            assert!((t - 0.37 * (k + 1) as f64).abs() < 1e-12);
        }
        // state at t = 0.4 has age 0.03 after the reset at 0.37
        let expected = m.to_original(&gradient_flow_state(&m, 0.4 - 0.37).unwrap());
        assert!((&path.states[4] - expected).amax() < 1e-12);
        assert!(simulate_trajectory(&m, &law, &NoiseModel::zero(3), 0.05, 0.1, &mut rng).is_err());
    }

    #[test]
    fn empirical_moment_basics() {
        let constant = DMatrix::from_element(10, 2, 3.0);
        let mom = empirical_moments(&constant).unwrap();
        assert!(mom.cov.iter().all(|&v| v == 0.0));
        let two = dmatrix![0.0; 2.0];
        let mom = empirical_moments(&two).unwrap();
        assert_eq!(mom.mean[0], 1.0);
        assert_eq!(mom.cov[(0, 0)], 2.0);
        assert!(empirical_moments(&dmatrix![1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let z = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mom = empirical_moments(&z).unwrap();
        assert!(mom.mean[0].abs() < 3.0 / (n as f64).sqrt() * 3.0);
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::isotropic(-1.0, 2).is_err());
        assert!(NoiseModel::from_eigenbasis(dmatrix![1.0, 0.5; 0.0, 1.0]).is_err());
        assert!(NoiseModel::from_eigenbasis(dmatrix![1.0, 2.0; 2.0, 1.0]).is_err());
        let tiny = NoiseModel::from_eigenbasis(dmatrix![0.0, 0.0; 0.0, -1e-12]).unwrap();
        assert!(tiny.diag().iter().all(|&v| v >= 0.0));
        let m = small_model();
        let iso = NoiseModel::from_original(&m, &(DMatrix::identity(3, 3) * 0.3)).unwrap();
        assert!((iso.sigma_tilde() - DMatrix::identity(3, 3) * 0.3).amax() < 1e-14);
    }
}
