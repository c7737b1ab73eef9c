//! Cross-module identity checks, runnable from the CLI.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{empirical_moments, laplace_average_quadrature, snapshot_batch, NoiseModel};
use crate::error::Result;
use crate::laws::ResetLaw;
use crate::linalg::logspace;
use crate::moments::{
    lyapunov_residual, poisson_covariance, poisson_stationary_mean, poisson_total_risk, renewal_covariance,
    renewal_snapshot_risk, reset_variance_peak, ridge_risk,
};
use crate::parallel::Execution;
use crate::spectral::{ridge_closed_form, SpectralModel};

/// Below this many snapshots a Monte Carlo miss is reported as a warning.
pub const MC_WARN_BELOW: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    /// Worst observed error (in units of `tolerance`'s quantity).
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub mc_samples: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{:<width$}  {}  {:.3e} (tol {:.1e})\n", c.name, c.status, c.value, c.tolerance));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mc_samples: usize,
    pub exec: Execution,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 42, mc_samples: 100_000, exec: Execution::Parallel }
    }
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    let status = if value <= tolerance { Status::Pass } else { Status::Fail };
    Check { name: name.to_string(), status, value, tolerance }
}

fn random_model<R: Rng>(rng: &mut R, n: usize, d: usize) -> Result<SpectralModel> {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    SpectralModel::from_normal_equations(x.transpose() * &x, x.transpose() * y, None)
}

/// Random orthonormal `d×d` matrix.
pub fn random_rotation<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    g.qr().q()
}

/// `H = V diag(μ) Vᵀ` with `b = H V α`, so `w̃* = α` up to eigenvector signs.
pub fn planted_model(mu: &[f64], alpha: &[f64], v: &DMatrix<f64>) -> Result<SpectralModel> {
    let h = v * DMatrix::from_diagonal(&DVector::from_column_slice(mu)) * v.transpose();
    let beta0 = v * DVector::from_column_slice(alpha);
    let b = &h * beta0;
    SpectralModel::from_normal_equations((&h + h.transpose()) * 0.5, b, None)
}

/// Largest deviation of snapshot moments from exact ones, in standard errors.
pub fn monte_carlo_z(model: &SpectralModel, law: &ResetLaw, noise: &NoiseModel, samples: usize, seed: u64, exec: Execution) -> Result<f64> {
    let exact = renewal_covariance(model, law, noise)?;
    let batch = snapshot_batch(model, law, noise, samples, seed, exec)?;
    let emp = empirical_moments(&batch.samples)?;
    let d = model.dim();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        worst = worst.max((emp.mean[i] - exact.mean_tilde[i]).abs() / emp.se_mean[i]);
        for j in i..d {
            worst = worst.max((emp.cov[(i, j)] - exact.total_tilde[(i, j)]).abs() / emp.se_cov[(i, j)]);
        }
    }
    Ok(worst)
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = random_model(&mut rng, 50, 10)?;
        for r in logspace(1e-2, 1e2, 9) {
            worst = worst.max((poisson_stationary_mean(&m, r)? - ridge_closed_form(&m, r)?).amax());
        }
    }
    checks.push(check("ridge_identity", worst, 1e-10));

    let m = random_model(&mut rng, 20, 5)?;
    let r = 0.7;
    let direct = (m.h() + DMatrix::identity(5, 5) * r).lu().solve(m.b()).expect("H + rI is invertible");
    checks.push(check("laplace_average", (laplace_average_quadrature(&m, r)? - direct).amax(), 1e-6));

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = random_model(&mut rng, 12, 6)?;
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() - 0.5);
        let noise = NoiseModel::from_eigenbasis(&a * a.transpose())?;
        let r = 10f64.powf(rng.random_range(-2.0..2.0));
        let c = poisson_covariance(&m, r, &noise)?;
        let scale = 1.0 + c.total.amax() * (m.mu().max() + r);
        worst = worst.max(lyapunov_residual(&m, r, &noise, &c.total, &c.mean)? / scale);
    }
    checks.push(check("lyapunov_residual", worst, 1e-10));

    let (mut cov_gap, mut risk_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let m = random_model(&mut rng, 12, 4)?;
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let noise = NoiseModel::from_eigenbasis(&a * a.transpose())?;
        let r = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = poisson_covariance(&m, r, &noise)?;
        let q = renewal_covariance(&m, &ResetLaw::exponential(r)?, &noise)?;
        cov_gap = cov_gap.max((&p.total_tilde - &q.total_tilde).amax());
        let mu: Vec<f64> = m.mu().iter().copied().collect();
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let diag = noise.diag();
        let s = rng.random_range(0.0..2.0);
        let pr = poisson_total_risk(&mu, &alpha, s, &diag, r)?.total();
        let qr = renewal_snapshot_risk(&mu, &alpha, s, &diag, &ResetLaw::exponential(r)?)?.total();
        risk_gap = risk_gap.max((pr - qr).abs() / pr.max(1.0));
    }
    checks.push(check("renewal_poisson_covariance", cov_gap, 1e-12));
    checks.push(check("renewal_poisson_risk", risk_gap, 1e-12));

    let mut tax: f64 = 0.0;
    for _ in 0..100 {
        let d = 4;
        let mu: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let alpha: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let s = rng.random_range(0.0..2.0);
        let r = 10f64.powf(rng.random_range(-2.0..2.0));
        let gap = poisson_total_risk(&mu, &alpha, s, &diag, r)?.total() - ridge_risk(&mu, &alpha, s, r)?.total();
        tax = tax.max(-gap);
    }
    checks.push(check("variance_tax", tax.max(0.0), 1e-12));

    let grid = logspace(1e-3, 1e3, 100_000);
    let mut worst: f64 = 0.0;
    for mu in [0.1, 1.0, 10.0] {
        let f = |r: f64| r / ((mu + r).powi(2) * (2.0 * mu + r));
        let arg = grid.iter().copied().max_by(|a, b| f(*a).total_cmp(&f(*b))).expect("grid is nonempty");
        let peak = reset_variance_peak(mu)?;
        worst = worst.max((arg - peak).abs() / peak);
    }
    checks.push(check("reset_variance_peak", worst, 1e-3));

    let v = random_rotation(&mut rng, 3);
    let model = planted_model(&[3.0, 1.0, 0.2], &[1.0, 1.0, 1.0], &v)?;
    let noise = NoiseModel::isotropic(0.5, 3)?;
    let laws = [ResetLaw::exponential(1.0)?, ResetLaw::gamma(3.0, 1.0)?, ResetLaw::deterministic(1.0)?];
    for (k, law) in laws.iter().enumerate() {
        let z = monte_carlo_z(&model, law, &noise, opts.mc_samples, opts.seed.wrapping_add(k as u64), opts.exec)?;
        let mut c = check(&format!("monte_carlo_{}", law.label()), z, 3.0);
        if c.status == Status::Fail && opts.mc_samples < MC_WARN_BELOW {
            c.status = Status::Warn;
        }
        checks.push(c);
    }

    Ok(VerifyReport { seed: opts.seed, mc_samples: opts.mc_samples, checks })
}
