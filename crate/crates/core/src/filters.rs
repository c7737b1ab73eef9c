//! Deterministic spectral estimators `w = V diag(g(μ_i)) w̃*`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::laws::ResetLaw;
use crate::linalg::is_sorted_ascending;
use crate::spectral::SpectralModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "RawFilter")]
pub enum FilterSpec {
    /// `μ / (μ + λ)`.
    Ridge { lambda: f64 },
    /// `g_S(μ)` of a reset law.
    Renewal { law: ResetLaw },
    /// `1{μ ≥ c}`. Not a renewal filter; reported as an external baseline.
    Cutoff { threshold: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawFilter {
    Ridge { lambda: f64 },
    Renewal { law: ResetLaw },
    Cutoff { threshold: f64 },
}

impl TryFrom<RawFilter> for FilterSpec {
    type Error = Error;

    fn try_from(raw: RawFilter) -> Result<Self> {
        match raw {
            RawFilter::Ridge { lambda } => FilterSpec::ridge(lambda),
            RawFilter::Renewal { law } => Ok(FilterSpec::Renewal { law }),
            RawFilter::Cutoff { threshold } => FilterSpec::cutoff(threshold),
        }
    }
}

impl FilterSpec {
    pub fn ridge(lambda: f64) -> Result<Self> {
        ensure_positive("lambda", lambda)?;
        Ok(FilterSpec::Ridge { lambda })
    }

    pub fn renewal(law: ResetLaw) -> Self {
        FilterSpec::Renewal { law }
    }

    pub fn cutoff(threshold: f64) -> Result<Self> {
        ensure_positive("threshold", threshold)?;
        Ok(FilterSpec::Cutoff { threshold })
    }

    /// Retained fraction at curvature `mu ≥ 0`. Negative input is treated as 0.
    pub fn value(&self, mu: f64) -> f64 {
        let mu = mu.max(0.0);
        match *self {
            FilterSpec::Ridge { lambda } => mu / (mu + lambda),
            FilterSpec::Renewal { law } => law.filter_g(mu).expect("nonnegative curvature"),
            FilterSpec::Cutoff { threshold } => {
                if mu >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// The cutoff sits outside the renewal class and is never admissibility-checked.
    pub fn is_external_baseline(&self) -> bool {
        matches!(self, FilterSpec::Cutoff { .. })
    }

    pub fn label(&self) -> String {
        match self {
            FilterSpec::Ridge { lambda } => format!("ridge(lambda={lambda})"),
            FilterSpec::Renewal { law } => format!("renewal:{}", law.label()),
            FilterSpec::Cutoff { threshold } => format!("cutoff(c={threshold})"),
        }
    }
}

/// Filtered estimate in original coordinates; null modes are exactly zero.
pub fn apply_filter(model: &SpectralModel, spec: &FilterSpec) -> DVector<f64> {
    model.filtered(|_, mu| spec.value(mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mismatch {
    pub lambda_weak: f64,
    pub lambda_strong: f64,
    pub relative_gap: f64,
}

/// Ridge penalties needed to match a reset law separately on a weak and a strong mode.
pub fn two_mode_mismatch(law: &ResetLaw, mu_weak: f64, mu_strong: f64) -> Result<Mismatch> {
    ensure_positive("mu_weak", mu_weak)?;
    ensure_positive("mu_strong", mu_strong)?;
    if mu_weak >= mu_strong {
        return Err(Error::Parameter(format!(
            "mu_weak ({mu_weak}) must be below mu_strong ({mu_strong})"
        )));
    }
    let lambda_weak = law.effective_penalty(mu_weak)?;
    let lambda_strong = law.effective_penalty(mu_strong)?;
    Ok(Mismatch {
        lambda_weak,
        lambda_strong,
        relative_gap: (lambda_weak - lambda_strong).abs() / lambda_strong,
    })
}

/// `(μ, g(μ))` rows over a positive ascending grid.
pub fn filter_curve(spec: &FilterSpec, mu_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if mu_grid.iter().any(|&m| !(m > 0.0 && m.is_finite())) || !is_sorted_ascending(mu_grid) {
        return Err(Error::Parameter("filter grid must be positive and strictly ascending".into()));
    }
    Ok(mu_grid.iter().map(|&m| (m, spec.value(m))).collect())
}
