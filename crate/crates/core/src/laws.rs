//! Reset-interval laws and their equilibrium-age transforms.
//!
//! For a reset interval `S` with mean `τ` and equilibrium age `A` (elapsed time
//! since the last reset, seen at a generic large time):
//!
//! - `L_S(μ) = E[e^{-μS}]`
//! - `h_S(μ) = E[e^{-μA}] = (1 - L_S(μ)) / (μτ)`, with `h_S(0) = 1`
//! - `g_S(μ) = 1 - h_S(μ)`, the retained fraction of a mode with curvature `μ`,
//!   with `g_S(0) = 0`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_nonnegative, ensure_positive, Error, Result};
use crate::linalg::is_sorted_ascending;

/// Below `ZERO_BRANCH · (1/E[S])` the transforms return their `μ = 0` values.
const ZERO_BRANCH: f64 = 1e-12;
/// Below `μ·E[S] = TAYLOR_BRANCH` the age transform uses its second-order expansion.
const TAYLOR_BRANCH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "RawLaw")]
pub enum ResetLaw {
    /// Poisson resetting at `rate`.
    Exponential { rate: f64 },
    /// Gamma intervals with the given `shape` and `mean` (scale `mean/shape`).
    Gamma { shape: f64, mean: f64 },
    /// Resets exactly every `period`.
    Deterministic { period: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawLaw {
    Exponential { rate: f64 },
    Gamma { shape: f64, mean: f64 },
    Deterministic { period: f64 },
}

impl TryFrom<RawLaw> for ResetLaw {
    type Error = Error;

    fn try_from(raw: RawLaw) -> Result<Self> {
        match raw {
            RawLaw::Exponential { rate } => ResetLaw::exponential(rate),
            RawLaw::Gamma { shape, mean } => ResetLaw::gamma(shape, mean),
            RawLaw::Deterministic { period } => ResetLaw::deterministic(period),
        }
    }
}

impl ResetLaw {
    pub fn exponential(rate: f64) -> Result<Self> {
        ensure_positive("rate", rate)?;
        Ok(ResetLaw::Exponential { rate })
    }

    pub fn gamma(shape: f64, mean: f64) -> Result<Self> {
        ensure_positive("shape", shape)?;
        ensure_positive("mean", mean)?;
        Ok(ResetLaw::Gamma { shape, mean })
    }

    pub fn deterministic(period: f64) -> Result<Self> {
        ensure_positive("period", period)?;
        Ok(ResetLaw::Deterministic { period })
    }

    /// `E[S]`.
    pub fn mean_interval(&self) -> f64 {
        match *self {
            ResetLaw::Exponential { rate } => 1.0 / rate,
            ResetLaw::Gamma { mean, .. } => mean,
            ResetLaw::Deterministic { period } => period,
        }
    }

    /// Raw moment `E[S^p]` for `p ∈ {1, 2, 3}`.
    pub fn interval_moment(&self, p: u32) -> f64 {
        match *self {
            ResetLaw::Exponential { rate } => (1..=p).map(f64::from).product::<f64>() / rate.powi(p as i32),
            ResetLaw::Gamma { shape, mean } => {
                let scale = mean / shape;
                (0..p).map(|j| shape + f64::from(j)).product::<f64>() * scale.powi(p as i32)
            }
            ResetLaw::Deterministic { period } => period.powi(p as i32),
        }
    }

    pub fn interval_variance(&self) -> f64 {
        let m = self.mean_interval();
        self.interval_moment(2) - m * m
    }

    /// `E[A] = E[S²] / (2E[S])`.
    pub fn mean_age(&self) -> f64 {
        self.interval_moment(2) / (2.0 * self.mean_interval())
    }

    /// `E[A²] = E[S³] / (3E[S])`.
    pub fn age_second_moment(&self) -> f64 {
        self.interval_moment(3) / (3.0 * self.mean_interval())
    }

    /// `L_S(μ) = E[e^{-μS}]`.
    pub fn laplace(&self, mu: f64) -> Result<f64> {
        ensure_nonnegative("mu", mu)?;
        Ok(match *self {
            ResetLaw::Exponential { rate } => rate / (rate + mu),
            ResetLaw::Gamma { shape, mean } => (-shape * (mean * mu / shape).ln_1p()).exp(),
            ResetLaw::Deterministic { period } => (-mu * period).exp(),
        })
    }

    /// `1 - L_S(μ)` evaluated without cancellation.
    fn one_minus_laplace(&self, mu: f64) -> f64 {
        match *self {
            ResetLaw::Exponential { rate } => mu / (rate + mu),
            ResetLaw::Gamma { shape, mean } => -(-shape * (mean * mu / shape).ln_1p()).exp_m1(),
            ResetLaw::Deterministic { period } => -(-mu * period).exp_m1(),
        }
    }

    fn zero_branch(&self, mu: f64) -> bool {
        mu < ZERO_BRANCH / self.mean_interval()
    }

    fn taylor_branch(&self, mu: f64) -> bool {
        mu * self.mean_interval() < TAYLOR_BRANCH
    }

    /// `h_S(μ) = E[e^{-μA}]`, the residual (non-retained) fraction.
    pub fn age_residual_h(&self, mu: f64) -> Result<f64> {
        ensure_nonnegative("mu", mu)?;
        if self.zero_branch(mu) {
            return Ok(1.0);
        }
        if self.taylor_branch(mu) {
            return Ok(1.0 - mu * self.mean_age() + 0.5 * mu * mu * self.age_second_moment());
        }
        Ok(self.one_minus_laplace(mu) / (mu * self.mean_interval()))
    }

    /// `g_S(μ) = 1 - h_S(μ)`, with `g_S(0) = 0`.
    pub fn filter_g(&self, mu: f64) -> Result<f64> {
        ensure_nonnegative("mu", mu)?;
        if self.zero_branch(mu) {
            return Ok(0.0);
        }
        if self.taylor_branch(mu) {
            return Ok(mu * self.mean_age() - 0.5 * mu * mu * self.age_second_moment());
        }
        Ok(1.0 - self.age_residual_h(mu)?)
    }

    /// `g_S(μ)/μ`, continuously extended to `E[A]` at `μ = 0`.
    pub fn g_over_mu(&self, mu: f64) -> Result<f64> {
        ensure_nonnegative("mu", mu)?;
        if self.zero_branch(mu) {
            return Ok(self.mean_age());
        }
        if self.taylor_branch(mu) {
            return Ok(self.mean_age() - 0.5 * mu * self.age_second_moment());
        }
        Ok(self.filter_g(mu)? / mu)
    }

    /// Ridge-equivalent penalty `λ_eff(μ) = μ h_S(μ) / g_S(μ)`.
    pub fn effective_penalty(&self, mu: f64) -> Result<f64> {
        ensure_nonnegative("mu", mu)?;
        let g = self.filter_g(mu)?;
        if g <= 0.0 {
            return Err(Error::Domain(format!("effective penalty undefined where g = 0 (mu = {mu})")));
        }
        Ok(mu * self.age_residual_h(mu)? / g)
    }

    /// Draws one reset interval.
    pub fn sample_interval<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ResetLaw::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            ResetLaw::Gamma { shape, mean } => {
                Gamma::new(shape, mean / shape).expect("validated gamma").sample(rng)
            }
            ResetLaw::Deterministic { period } => period,
        }
    }

    /// Draws an equilibrium age, density `P(S > u) / E[S]`.
    ///
    /// The Gamma age is a uniform fraction of a length-biased interval, and the
    /// length-biased `Gamma(k, θ)` is `Gamma(k + 1, θ)`.
    pub fn sample_equilibrium_age<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ResetLaw::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            ResetLaw::Gamma { shape, mean } => {
                let biased = Gamma::new(shape + 1.0, mean / shape).expect("validated gamma").sample(rng);
                rng.random::<f64>() * biased
            }
            ResetLaw::Deterministic { period } => rng.random::<f64>() * period,
        }
    }

    /// Short label used in reports, e.g. `gamma(k=3,mean=1)`.
    pub fn label(&self) -> String {
        match *self {
            ResetLaw::Exponential { rate } => format!("exponential(rate={rate})"),
            ResetLaw::Gamma { shape, mean } => format!("gamma(k={shape},mean={mean})"),
            ResetLaw::Deterministic { period } => format!("deterministic(period={period})"),
        }
    }

    /// Runs the necessary admissibility conditions on an ascending positive grid.
    pub fn admissibility_check(&self, mu_grid: &[f64]) -> Result<AdmissibilityReport> {
        if mu_grid.is_empty() || !is_sorted_ascending(mu_grid) || mu_grid[0] <= 0.0 {
            return Err(Error::Parameter("mu grid must be nonempty, positive and strictly ascending".into()));
        }
        let tau = self.mean_interval();
        let h: Vec<f64> = mu_grid.iter().map(|&m| self.age_residual_h(m)).collect::<Result<_>>()?;
        let g: Vec<f64> = mu_grid.iter().map(|&m| self.filter_g(m)).collect::<Result<_>>()?;

        let range = h.iter().map(|&x| (-x).max(x - 1.0)).fold(f64::NEG_INFINITY, f64::max);
        let h_mono = h.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let g_mono = g.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        let g_floor = -g[0];
        let tail = mu_grid
            .iter()
            .zip(&g)
            .filter(|(&m, _)| m * tau >= 100.0)
            .map(|(&m, &gv)| (1.0 - gv) - 1.01 / (m * tau))
            .fold(f64::NEG_INFINITY, f64::max);

        let check = |name: &str, worst: f64| AdmissibilityCheck {
            name: name.to_string(),
            passed: worst <= 0.0 || worst == f64::NEG_INFINITY,
            worst_violation: worst.max(0.0),
        };
        Ok(AdmissibilityReport {
            law: *self,
            checks: vec![
                check("h_in_unit_interval", range),
                check("h_nonincreasing", h_mono),
                check("g_nondecreasing", g_mono),
                check("g_nonnegative_at_grid_min", g_floor),
                check("high_curvature_tail", tail),
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityCheck {
    pub name: String,
    pub passed: bool,
    /// Largest amount by which the condition was violated (0 when it holds).
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub law: ResetLaw,
    pub checks: Vec<AdmissibilityCheck>,
}

impl AdmissibilityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}
