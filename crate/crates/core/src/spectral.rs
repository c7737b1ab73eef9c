//! Spectral representation of a least-squares problem.
//!
//! Every downstream formula works in the eigenbasis of `H = XᵀX`: curvatures
//! `μ_i`, projected right-hand side `b̃ = Vᵀb`, and min-norm OLS coordinates
//! `w̃*_i = b̃_i / μ_i` (zero on the nullspace).

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_positive, Error, Result};
use crate::linalg::{max_abs, symmetric_eigen};

/// Relative factor for the default rank threshold `1e-10 · max μ`.
pub const DEFAULT_RANK_TOL_REL: f64 = 1e-10;
/// Negative eigenvalues above `-CLIP_TOL · max(1, max|μ|)` are round-off and clipped to zero.
pub const CLIP_TOL: f64 = 1e-10;

/// Design matrix and responses, with the optional ground truth used by risk evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub beta0: Option<DVector<f64>>,
    pub sigma_eta: Option<f64>,
}

impl DesignData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let data = DesignData { x, y, beta0: None, sigma_eta: None };
        data.validate()?;
        Ok(data)
    }

    pub fn with_truth(mut self, beta0: DVector<f64>, sigma_eta: f64) -> Result<Self> {
        self.beta0 = Some(beta0);
        self.sigma_eta = Some(sigma_eta);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Input(format!("design must be at least 1x1, got {n}x{d}")));
        }
        if self.y.len() != n {
            return Err(Error::Input(format!("y has length {}, expected {n}", self.y.len())));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("design or responses contain non-finite entries".into()));
        }
        if let Some(beta0) = &self.beta0 {
            if beta0.len() != d {
                return Err(Error::Input(format!("beta0 has length {}, expected {d}", beta0.len())));
            }
            if beta0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("beta0 contains non-finite entries".into()));
            }
        }
        if let Some(s) = self.sigma_eta {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Input(format!("sigma_eta must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}

/// Eigen-coordinates of `H = XᵀX` and `b = Xᵀy`. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    mu: DVector<f64>,
    v: DMatrix<f64>,
    b_tilde: DVector<f64>,
    w_star_tilde: DVector<f64>,
    h: DMatrix<f64>,
    b: DVector<f64>,
    rank_tol: f64,
}

/// Builds the spectral model of a design. `rank_tol = None` uses `1e-10 · max μ`.
pub fn build_spectral_model(data: &DesignData, rank_tol: Option<f64>) -> Result<SpectralModel> {
    data.validate()?;
    let h = data.x.transpose() * &data.x;
    let b = data.x.transpose() * &data.y;
    SpectralModel::from_normal_equations(h, b, rank_tol)
}

impl SpectralModel {
    /// Builds the model directly from `H` (symmetric PSD) and `b`, which must
    /// lie in the column space of `H`.
    pub fn from_normal_equations(
        h: DMatrix<f64>,
        b: DVector<f64>,
        rank_tol: Option<f64>,
    ) -> Result<Self> {
        let d = h.nrows();
        if d == 0 || h.ncols() != d || b.len() != d {
            return Err(Error::Input(format!(
                "H is {}x{} but b has length {}",
                h.nrows(),
                h.ncols(),
                b.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("b contains non-finite entries".into()));
        }
        let eig = symmetric_eigen(&h)?;
        let scale = eig.values.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        let mut mu = eig.values;
        for value in mu.iter_mut() {
            if *value < 0.0 {
                if *value < -CLIP_TOL * scale {
                    return Err(Error::Input(format!("H is not positive semidefinite (eigenvalue {value})")));
                }
                *value = 0.0;
            }
        }
        let max_mu = mu.iter().fold(0.0_f64, |m, x| m.max(*x));
        let rank_tol = match rank_tol {
            Some(t) => {
                ensure_positive("rank_tol", t)?;
                t
            }
            None if max_mu > 0.0 => DEFAULT_RANK_TOL_REL * max_mu,
            None => f64::MIN_POSITIVE,
        };

        let v = eig.vectors;
        let b_tilde = v.transpose() * &b;
        let b_norm = b.norm();
        let mut w_star_tilde = DVector::zeros(d);
        for i in 0..d {
            if mu[i] > rank_tol {
                w_star_tilde[i] = b_tilde[i] / mu[i];
            } else if b_tilde[i].abs() > 1e-8 * (1.0 + b_norm) {
                return Err(Error::Input(format!(
                    "b is not in the column space of H (|b̃_{i}| = {:.3e} on a null mode)",
                    b_tilde[i].abs()
                )));
            }
        }
        Ok(SpectralModel { mu, v, b_tilde, w_star_tilde, h, b, rank_tol })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Eigenvalues of `H`, descending and nonnegative.
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Orthonormal eigenvectors of `H` as columns.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn b_tilde(&self) -> &DVector<f64> {
        &self.b_tilde
    }

    pub fn w_star_tilde(&self) -> &DVector<f64> {
        &self.w_star_tilde
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// Whether mode `i` is numerically in the nullspace of `H`.
    pub fn is_null(&self, i: usize) -> bool {
        self.mu[i] <= self.rank_tol
    }

    pub fn rank(&self) -> usize {
        (0..self.dim()).filter(|&i| !self.is_null(i)).count()
    }

    pub fn to_original(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.v * coords
    }

    pub fn to_eigen(&self, w: &DVector<f64>) -> DVector<f64> {
        self.v.transpose() * w
    }

    /// `V A Vᵀ` for an eigenbasis matrix `A`.
    pub fn matrix_to_original(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.v * a * self.v.transpose()
    }

    /// `Vᵀ A V` for an original-basis matrix `A`.
    pub fn matrix_to_eigen(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.v.transpose() * a * &self.v
    }

    /// Applies a modewise factor to the OLS coordinates and rotates back.
    pub fn filtered(&self, factor: impl Fn(usize, f64) -> f64) -> DVector<f64> {
        let coords = DVector::from_fn(self.dim(), |i, _| {
            if self.is_null(i) {
                0.0
            } else {
                factor(i, self.mu[i]) * self.w_star_tilde[i]
            }
        });
        self.to_original(&coords)
    }

    /// Model for `u = w − w0`, so that resetting `u` to zero resets `w` to `w0`.
    /// Add `w0` back to anything computed from the returned model.
    pub fn recentred(&self, w0: &DVector<f64>) -> Result<SpectralModel> {
        if w0.len() != self.dim() {
            return Err(Error::Input("reset target has the wrong dimension".into()));
        }
        SpectralModel::from_normal_equations(self.h.clone(), &self.b - &self.h * w0, Some(self.rank_tol))
    }

    /// `‖V diag(μ) Vᵀ − H‖_max`.
    pub fn reconstruction_error(&self) -> f64 {
        let rec = self.matrix_to_original(&DMatrix::from_diagonal(&self.mu));
        max_abs(&(rec - &self.h))
    }
}

/// `H⁺b`, the minimum-norm least-squares solution.
pub fn min_norm_ols(model: &SpectralModel) -> DVector<f64> {
    model.to_original(model.w_star_tilde())
}

/// `(H + λI)⁻¹ b` through the modewise shrinkage `μ/(μ+λ)`.
pub fn ridge_closed_form(model: &SpectralModel, lambda: f64) -> Result<DVector<f64>> {
    ensure_positive("lambda", lambda)?;
    Ok(model.filtered(|_, mu| mu / (mu + lambda)))
}
