//! Mean-field variational Bayes in unconstrained coordinates, with
//! linear-response covariance corrections and prior-hyperparameter
//! sensitivities.
//!
//! The layers build bottom-up:
//!
//! * [`dualnum`] — hyper-dual forward-mode scalars and exact gradient /
//!   Hessian drivers;
//! * [`varfamily`] — Gaussian variational factors, coordinate layouts and
//!   Gauss–Hermite quadrature;
//! * [`models`] — the hierarchical microcredit model plus two analytic
//!   oracle models, each exposing a KL objective, the expected log prior
//!   and an exact log joint;
//! * [`optimize`] — deterministic Newton trust-region minimization of KL;
//! * [`lrvb`] — linear-response covariances and sensitivity solves;
//! * [`mcmc`] — an adaptive random-walk Metropolis oracle and VB/MCMC
//!   comparison tables.

pub mod dualnum;
pub mod lrvb;
pub mod mcmc;
pub mod models;
pub mod optimize;
pub mod varfamily;

#[cfg(test)]
mod fd;
mod special;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A lifted primitive was evaluated outside its domain.
    #[error("domain error in `{primitive}`: argument {value} is outside the domain")]
    Domain { primitive: &'static str, value: f64 },
    /// A computed quantity came out NaN or infinite.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    /// A caller-supplied parameter violates a precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// Input data failed validation.
    #[error("invalid data: {0}")]
    InvalidData(String),
    /// The optimizer could not make progress.
    #[error("optimization failed: {0}")]
    Optimization(String),
    /// A matrix that must be positive definite is not.
    #[error("{0} is not positive definite; the fit did not converge to a local minimum")]
    NotPositiveDefinite(&'static str),
    /// MCMC diagnostics detected a broken chain.
    #[error("mcmc diagnostics: {0}")]
    Mcmc(String),
    /// Two structures that must share a layout do not.
    #[error("schema mismatch: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, Error>;
