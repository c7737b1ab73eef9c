//! Spectral regularization from stochastic resetting.
//!
//! Gradient flow on a least-squares objective, interrupted by renewal resets
//! to the origin, has an equilibrium mean that is a spectral filter of the
//! minimum-norm OLS solution. Poisson resets give ridge exactly; other reset
//! laws give sharper filters. This crate provides:
//!
//! - [`spectral`]: eigenbasis of `H = XᵀX`, min-norm OLS and closed-form ridge.
//! - [`laws`]: reset-interval laws, their Laplace machinery and exact samplers.
//! - [`filters`]: deterministic spectral estimators (ridge, renewal, cutoff).
//! - [`dynamics`]: exact simulation of reset gradient flow / OU dynamics.
//! - [`moments`]: closed-form stationary covariance and risk decompositions.
//! - [`experiments`]: validation-tuned Monte Carlo sweeps on synthetic designs.
//! - [`cli`]: the `reset-ridge` command-line front end.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod io;
pub mod laws;
pub mod linalg;
pub mod moments;
pub mod parallel;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use filters::FilterSpec;
pub use laws::ResetLaw;
pub use parallel::Execution;
pub use spectral::{DesignData, SpectralModel};
