//! Closed-form stationary moments and risks under resetting.
//!
//! Everything is computed per eigenmode. The covariance of a snapshot splits
//! into accumulated OU noise (`sgd`) and the spread of the deterministic
//! relaxation path seen at a random age (`timing`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::NoiseModel;
use crate::error::{ensure_nonnegative, ensure_positive, Error, Result};
use crate::laws::ResetLaw;
use crate::linalg::{is_sorted_ascending, symmetric_eigen};
use crate::parallel::Execution;
use crate::spectral::SpectralModel;

const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CovarianceDecomposition {
    pub law: ResetLaw,
    /// Stationary mean `g(μ_i) w̃*_i` in eigen-coordinates.
    pub mean_tilde: DVector<f64>,
    pub sigma_sgd_tilde: DMatrix<f64>,
    pub sigma_timing_tilde: DMatrix<f64>,
    pub total_tilde: DMatrix<f64>,
    /// Mean and total covariance in original coordinates.
    pub mean: DVector<f64>,
    pub total: DMatrix<f64>,
}

impl CovarianceDecomposition {
    fn assemble(
        model: &SpectralModel,
        law: ResetLaw,
        mean_tilde: DVector<f64>,
        sgd: DMatrix<f64>,
        timing: DMatrix<f64>,
    ) -> Self {
        let total_tilde = &sgd + &timing;
        CovarianceDecomposition {
            law,
            mean: model.to_original(&mean_tilde),
            total: model.matrix_to_original(&total_tilde),
            mean_tilde,
            sigma_sgd_tilde: sgd,
            sigma_timing_tilde: timing,
            total_tilde,
        }
    }

    pub fn sgd_original(&self, model: &SpectralModel) -> DMatrix<f64> {
        model.matrix_to_original(&self.sigma_sgd_tilde)
    }

    pub fn timing_original(&self, model: &SpectralModel) -> DMatrix<f64> {
        model.matrix_to_original(&self.sigma_timing_tilde)
    }

    /// Checks that both components are PSD up to `-1e-10` (relative to their scale).
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("sgd", &self.sigma_sgd_tilde), ("timing", &self.sigma_timing_tilde)] {
            let scale = 1.0 + m.amax();
            let min = symmetric_eigen(m)?.values.iter().copied().fold(f64::INFINITY, f64::min);
            if min < -PSD_TOL * scale {
                return Err(Error::Numerical(format!("{name} covariance has eigenvalue {min:.3e}")));
            }
        }
        Ok(())
    }
}

/// `(H + rI)⁻¹ b`, evaluated as `b̃_i / (μ_i + r)` in the eigenbasis.
pub fn poisson_stationary_mean(model: &SpectralModel, r: f64) -> Result<DVector<f64>> {
    ensure_positive("r", r)?;
    let coords = DVector::from_fn(model.dim(), |i, _| model.b_tilde()[i] / (model.mu()[i] + r));
    Ok(model.to_original(&coords))
}

fn check_noise(model: &SpectralModel, noise: &NoiseModel) -> Result<()> {
    if noise.dim() != model.dim() {
        return Err(Error::Input(format!(
            "noise model has dimension {}, model has {}",
            noise.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Stationary covariance under Poisson resetting at rate `r`, solved mode by mode.
pub fn poisson_covariance(model: &SpectralModel, r: f64, noise: &NoiseModel) -> Result<CovarianceDecomposition> {
    ensure_positive("r", r)?;
    check_noise(model, noise)?;
    let d = model.dim();
    let mu = model.mu();
    let b = model.b_tilde();
    let s = noise.sigma_tilde();
    let sgd = DMatrix::from_fn(d, d, |i, j| s[(i, j)] / (mu[i] + mu[j] + r));
    let timing = DMatrix::from_fn(d, d, |i, j| {
        r * b[i] * b[j] / ((mu[i] + r) * (mu[j] + r) * (mu[i] + mu[j] + r))
    });
    let mean = DVector::from_fn(d, |i, _| b[i] / (mu[i] + r));
    Ok(CovarianceDecomposition::assemble(model, ResetLaw::exponential(r)?, mean, sgd, timing))
}

/// Max-norm residual of `(H + r/2)Σ + Σ(H + r/2) = r m mᵀ + Σ_noise` in original coordinates.
pub fn lyapunov_residual(
    model: &SpectralModel,
    r: f64,
    noise: &NoiseModel,
    sigma: &DMatrix<f64>,
    mean: &DVector<f64>,
) -> Result<f64> {
    ensure_positive("r", r)?;
    check_noise(model, noise)?;
    let d = model.dim();
    if sigma.shape() != (d, d) || mean.len() != d {
        return Err(Error::Input("covariance or mean has the wrong dimension".into()));
    }
    let a = model.h() + DMatrix::identity(d, d) * (0.5 * r);
    let noise_original = model.matrix_to_original(noise.sigma_tilde());
    let residual = &a * sigma + sigma * &a - mean * mean.transpose() * r - noise_original;
    Ok(residual.amax())
}

/// Stationary snapshot covariance for an arbitrary renewal law.
pub fn renewal_covariance(model: &SpectralModel, law: &ResetLaw, noise: &NoiseModel) -> Result<CovarianceDecomposition> {
    check_noise(model, noise)?;
    let d = model.dim();
    let mu = model.mu();
    let w = model.w_star_tilde();
    let s = noise.sigma_tilde();
    let h: Vec<f64> = mu.iter().map(|&m| law.age_residual_h(m)).collect::<Result<_>>()?;
    let mut sgd = DMatrix::zeros(d, d);
    let mut timing = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let pair = mu[i] + mu[j];
            let sv = s[(i, j)] * law.g_over_mu(pair)?;
            let tv = w[i] * w[j] * (law.age_residual_h(pair)? - h[i] * h[j]);
            sgd[(i, j)] = sv;
            sgd[(j, i)] = sv;
            timing[(i, j)] = tv;
            timing[(j, i)] = tv;
        }
    }
    let mean = DVector::from_fn(d, |i, _| (1.0 - h[i]) * w[i]);
    Ok(CovarianceDecomposition::assemble(model, *law, mean, sgd, timing))
}

/// Ratio of reset (timing) to SGD variance of mode `i` under Poisson resetting.
/// Returns `+∞` when the mode receives no gradient noise.
pub fn snr_ratio(model: &SpectralModel, r: f64, noise: &NoiseModel, i: usize) -> Result<f64> {
    ensure_positive("r", r)?;
    check_noise(model, noise)?;
    if i >= model.dim() {
        return Err(Error::Parameter(format!("mode {i} out of range for dimension {}", model.dim())));
    }
    let s = noise.sigma_tilde()[(i, i)];
    if s == 0.0 {
        return Ok(f64::INFINITY);
    }
    let b = model.b_tilde()[i];
    let k = model.mu()[i] + r;
    Ok(r * b * b / (k * k * s))
}

/// Which estimator a [`RiskReport`] describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Ridge { lambda: f64 },
    /// Noise-averaged Poisson snapshot risk.
    Poisson { rate: f64 },
    /// Poisson snapshot risk given the realized `b̃`.
    PoissonConditional { rate: f64 },
    Renewal { law: ResetLaw },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub estimator: Estimator,
    pub sigma_eta: f64,
    /// Diagonal of `Σ̃` (only the diagonal enters a risk).
    pub noise_diag: Vec<f64>,
    /// `α_i = v_iᵀ β₀`.
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTotals {
    pub bias_sq: f64,
    pub obs_var: f64,
    pub sgd_var: f64,
    pub timing_var: f64,
    pub total: f64,
}

/// Per-mode risk terms and their sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub bias_sq: Vec<f64>,
    pub obs_var: Vec<f64>,
    pub sgd_var: Vec<f64>,
    pub timing_var: Vec<f64>,
    pub totals: RiskTotals,
    pub params: RiskParams,
}

impl RiskReport {
    fn from_terms(params: RiskParams, terms: Vec<[f64; 4]>) -> Self {
        let col = |k: usize| terms.iter().map(|t| t[k]).collect::<Vec<_>>();
        let (bias_sq, obs_var, sgd_var, timing_var) = (col(0), col(1), col(2), col(3));
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let totals = RiskTotals {
            bias_sq: sum(&bias_sq),
            obs_var: sum(&obs_var),
            sgd_var: sum(&sgd_var),
            timing_var: sum(&timing_var),
            total: terms.iter().flatten().sum(),
        };
        RiskReport { bias_sq, obs_var, sgd_var, timing_var, totals, params }
    }

    pub fn total(&self) -> f64 {
        self.totals.total
    }

    /// Sum of the four terms of mode `i`.
    pub fn mode_total(&self, i: usize) -> f64 {
        self.bias_sq[i] + self.obs_var[i] + self.sgd_var[i] + self.timing_var[i]
    }
}

fn check_modes(mu: &[f64], alpha: &[f64], sigma_eta: f64, noise_diag: &[f64]) -> Result<()> {
    if alpha.len() != mu.len() || noise_diag.len() != mu.len() {
        return Err(Error::Input(format!(
            "mu, alpha and noise diagonal lengths differ ({}, {}, {})",
            mu.len(),
            alpha.len(),
            noise_diag.len()
        )));
    }
    ensure_nonnegative("sigma_eta", sigma_eta)?;
    for &m in mu {
        ensure_nonnegative("mu", m)?;
    }
    for &a in alpha {
        if !a.is_finite() {
            return Err(Error::Input("alpha has non-finite entries".into()));
        }
    }
    for &s in noise_diag {
        ensure_nonnegative("noise variance", s)?;
    }
    Ok(())
}

fn params(estimator: Estimator, mu: &[f64], alpha: &[f64], sigma_eta: f64, noise_diag: &[f64]) -> RiskParams {
    RiskParams {
        estimator,
        sigma_eta,
        noise_diag: noise_diag.to_vec(),
        alpha: alpha.to_vec(),
        mu: mu.to_vec(),
    }
}

/// Expected `‖ŵ_ridge(λ) − β₀‖²` over observation noise of level `sigma_eta`.
pub fn ridge_risk(mu: &[f64], alpha: &[f64], sigma_eta: f64, lambda: f64) -> Result<RiskReport> {
    ensure_positive("lambda", lambda)?;
    let zeros = vec![0.0; mu.len()];
    check_modes(mu, alpha, sigma_eta, &zeros)?;
    let s2 = sigma_eta * sigma_eta;
    let terms = mu
        .iter()
        .zip(alpha)
        .map(|(&m, &a)| {
            let k = (m + lambda) * (m + lambda);
            [lambda * lambda * a * a / k, s2 * m / k, 0.0, 0.0]
        })
        .collect();
    Ok(RiskReport::from_terms(params(Estimator::Ridge { lambda }, mu, alpha, sigma_eta, &zeros), terms))
}

/// Noise-averaged risk of a Poisson-reset snapshot: ridge risk at `λ = r`
/// plus SGD variance plus reset (timing) variance.
pub fn poisson_total_risk(mu: &[f64], alpha: &[f64], sigma_eta: f64, noise_diag: &[f64], r: f64) -> Result<RiskReport> {
    ensure_positive("r", r)?;
    check_modes(mu, alpha, sigma_eta, noise_diag)?;
    let s2 = sigma_eta * sigma_eta;
    let terms = mu
        .iter()
        .zip(alpha)
        .zip(noise_diag)
        .map(|((&m, &a), &s)| {
            let k = (m + r) * (m + r);
            let two = 2.0 * m + r;
            [
                r * r * a * a / k,
                s2 * m / k,
                s / two,
                r * (m * m * a * a + s2 * m) / (k * two),
            ]
        })
        .collect();
    Ok(RiskReport::from_terms(
        params(Estimator::Poisson { rate: r }, mu, alpha, sigma_eta, noise_diag),
        terms,
    ))
}

/// Poisson snapshot risk for a realized `b̃`:
/// `Σ (b̃/(μ+r) − α)² + Σ̃/(2μ+r) + r b̃²/((μ+r)²(2μ+r))`.
pub fn poisson_conditional_risk(
    mu: &[f64],
    b_tilde: &[f64],
    alpha: &[f64],
    noise_diag: &[f64],
    r: f64,
) -> Result<RiskReport> {
    ensure_positive("r", r)?;
    check_modes(mu, alpha, 0.0, noise_diag)?;
    if b_tilde.len() != mu.len() {
        return Err(Error::Input("b_tilde length differs from mu".into()));
    }
    let terms = (0..mu.len())
        .map(|i| {
            let (m, b, a, s) = (mu[i], b_tilde[i], alpha[i], noise_diag[i]);
            let k = m + r;
            let two = 2.0 * m + r;
            let miss = b / k - a;
            [miss * miss, 0.0, s / two, r * b * b / (k * k * two)]
        })
        .collect();
    Ok(RiskReport::from_terms(
        params(Estimator::PoissonConditional { rate: r }, mu, alpha, 0.0, noise_diag),
        terms,
    ))
}

/// Noise-averaged snapshot risk for any renewal law.
///
/// A mode with `μ = 0` contributes `α² + Σ̃_ii E[A]`. With `sigma_eta > 0`
/// such a mode has no defined observation-noise term and is rejected.
pub fn renewal_snapshot_risk(
    mu: &[f64],
    alpha: &[f64],
    sigma_eta: f64,
    noise_diag: &[f64],
    law: &ResetLaw,
) -> Result<RiskReport> {
    check_modes(mu, alpha, sigma_eta, noise_diag)?;
    let s2 = sigma_eta * sigma_eta;
    let terms = (0..mu.len())
        .map(|i| {
            let (m, a, s) = (mu[i], alpha[i], noise_diag[i]);
            if m == 0.0 {
                if sigma_eta > 0.0 {
                    return Err(Error::Domain(format!(
                        "mode {i} has zero curvature; the observation-noise term is undefined for sigma_eta > 0"
                    )));
                }
                return Ok([a * a, 0.0, s * law.mean_age(), 0.0]);
            }
            let h = law.age_residual_h(m)?;
            let g = law.filter_g(m)?;
            let spread = (law.age_residual_h(2.0 * m)? - h * h).max(0.0);
            Ok([
                h * h * a * a,
                s2 * g * g / m,
                s * law.g_over_mu(2.0 * m)?,
                (a * a + s2 / m) * spread,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskReport::from_terms(
        params(Estimator::Renewal { law: *law }, mu, alpha, sigma_eta, noise_diag),
        terms,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalRate {
    pub r_star: f64,
    pub risk_at_r_star: f64,
    /// Set when the grid minimum sits at either end of the grid.
    pub boundary_flag: bool,
}

fn check_rate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Parameter("rate grid is empty".into()));
    }
    if grid.len() < 32 {
        return Err(Error::Parameter(format!("rate grid needs at least 32 points, got {}", grid.len())));
    }
    if grid[0] <= 0.0 || !grid.iter().all(|r| r.is_finite()) || !is_sorted_ascending(grid) {
        return Err(Error::Parameter("rate grid must be positive and strictly ascending".into()));
    }
    if grid[grid.len() - 1] / grid[0] < 1e4 * (1.0 - 1e-12) {
        return Err(Error::Parameter("rate grid must span at least 4 decades".into()));
    }
    Ok(())
}

/// Global grid search over `grid`, then golden-section refinement in `log r`
/// on the two cells around the best grid point, to `1e-8` relative.
pub fn minimize_over_rate(grid: &[f64], objective: impl Fn(f64) -> Result<f64>) -> Result<OptimalRate> {
    check_rate_grid(grid)?;
    let values: Vec<f64> = grid.iter().map(|&r| objective(r)).collect::<Result<_>>()?;
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    if best == 0 || best == grid.len() - 1 {
        return Ok(OptimalRate { r_star: grid[best], risk_at_r_star: values[best], boundary_flag: true });
    }
    let f = |x: f64| objective(x.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (grid[best - 1].ln(), grid[best + 1].ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-8 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    let (r_star, risk) = (x.exp(), f(x)?);
    if risk <= values[best] {
        Ok(OptimalRate { r_star, risk_at_r_star: risk, boundary_flag: false })
    } else {
        Ok(OptimalRate { r_star: grid[best], risk_at_r_star: values[best], boundary_flag: false })
    }
}

/// Poisson rate minimizing the noise-averaged snapshot risk.
pub fn optimal_poisson_rate(
    mu: &[f64],
    alpha: &[f64],
    sigma_eta: f64,
    noise_diag: &[f64],
    r_grid: &[f64],
) -> Result<OptimalRate> {
    check_modes(mu, alpha, sigma_eta, noise_diag)?;
    minimize_over_rate(r_grid, |r| Ok(poisson_total_risk(mu, alpha, sigma_eta, noise_diag, r)?.total()))
}

/// Rate maximizing the per-mode reset variance `r/((μ+r)²(2μ+r))`: `μ(√5 − 1)/2`.
pub fn reset_variance_peak(mu: f64) -> Result<f64> {
    ensure_positive("mu", mu)?;
    Ok(mu * (5f64.sqrt() - 1.0) / 2.0)
}

/// Configuration of the best-law landscape over `(μτ, ν)` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    #[serde(default = "default_k_values")]
    pub k_values: Vec<u32>,
    /// Adds the deterministic (periodic) limit to the candidate set.
    #[serde(default = "default_true")]
    pub include_periodic: bool,
    pub mu_tau_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    #[serde(default = "default_gain_threshold")]
    pub gain_threshold: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
}

fn default_k_values() -> Vec<u32> {
    vec![1, 2, 3, 5, 10]
}
fn default_true() -> bool {
    true
}
fn default_gain_threshold() -> f64 {
    0.015
}
fn default_tau() -> f64 {
    1.0
}
fn default_beta0() -> f64 {
    1.0
}

impl LandscapeConfig {
    pub fn new(mu_tau_grid: Vec<f64>, nu_grid: Vec<f64>) -> Self {
        LandscapeConfig {
            k_values: default_k_values(),
            include_periodic: true,
            mu_tau_grid,
            nu_grid,
            gain_threshold: default_gain_threshold(),
            tau: default_tau(),
            beta0: default_beta0(),
        }
    }

    /// Candidate laws at mean interval `tau`, labelled `poisson`, `erlang-k`, `periodic`.
    pub fn candidates(&self) -> Result<Vec<(String, ResetLaw)>> {
        let mut out = Vec::new();
        for &k in &self.k_values {
            if k == 0 {
                return Err(Error::Parameter("Erlang shape must be at least 1".into()));
            }
            if k == 1 {
                out.push(("poisson".to_string(), ResetLaw::exponential(1.0 / self.tau)?));
            } else {
                out.push((format!("erlang-{k}"), ResetLaw::gamma(k as f64, self.tau)?));
            }
        }
        if self.include_periodic {
            out.push(("periodic".to_string(), ResetLaw::deterministic(self.tau)?));
        }
        if !out.iter().any(|(l, _)| l == "poisson") {
            out.insert(0, ("poisson".to_string(), ResetLaw::exponential(1.0 / self.tau)?));
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.mu_tau_grid.is_empty() || self.nu_grid.is_empty() {
            return Err(Error::Parameter("landscape grids must be nonempty".into()));
        }
        ensure_positive("tau", self.tau)?;
        ensure_nonnegative("gain_threshold", self.gain_threshold)?;
        for &m in &self.mu_tau_grid {
            ensure_positive("mu_tau", m)?;
        }
        for &n in &self.nu_grid {
            ensure_nonnegative("nu", n)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeCell {
    pub mu_tau: f64,
    pub nu: f64,
    /// `poisson` whenever the best gain is below the threshold.
    pub best_law: String,
    /// `(R_poisson − R_best) / R_poisson` for the lowest-risk candidate.
    pub gain: f64,
}

/// Single mode with `α = β₀`, `σ_η²/μ = ν²/2` and `Σ̃ τ = ν²/2`, every law at mean interval `τ`.
pub fn landscape_cell(config: &LandscapeConfig, candidates: &[(String, ResetLaw)], mu_tau: f64, nu: f64) -> Result<LandscapeCell> {
    let mu = mu_tau / config.tau;
    let half = nu * nu / 2.0;
    let sigma_eta = (mu * half).sqrt();
    let noise = half / config.tau;
    let risk = |law: &ResetLaw| -> Result<f64> {
        Ok(renewal_snapshot_risk(&[mu], &[config.beta0], sigma_eta, &[noise], law)?.total())
    };
    let poisson = risk(&ResetLaw::exponential(1.0 / config.tau)?)?;
    let mut best = ("poisson".to_string(), poisson);
    for (label, law) in candidates {
        let v = risk(law)?;
        if v < best.1 {
            best = (label.clone(), v);
        }
    }
    let gain = if poisson > 0.0 { (poisson - best.1) / poisson } else { 0.0 };
    let best_law = if gain < config.gain_threshold { "poisson".to_string() } else { best.0 };
    Ok(LandscapeCell { mu_tau, nu, best_law, gain })
}

/// Evaluates every cell, ordered by `μτ` then `ν` as listed in the config.
pub fn risk_landscape(config: &LandscapeConfig, exec: Execution) -> Result<Vec<LandscapeCell>> {
    config.validate()?;
    let candidates = config.candidates()?;
    let nn = config.nu_grid.len();
    exec.try_map_indexed(config.mu_tau_grid.len() * nn, |c| {
        landscape_cell(config, &candidates, config.mu_tau_grid[c / nn], config.nu_grid[c % nn])
    })
}
