//! Learning stationary stochastic differential equations as causal models.
//!
//! A stationary SDE `dx_t = f(x_t) dt + sigma(x_t) dW_t` induces a
//! time-invariant density over its variables. This crate fits the drift and
//! diffusion parameters of such systems to interventional datasets by
//! minimizing a kernelized deviation-from-stationarity objective: the squared
//! RKHS norm of the function `x' -> E_x[L_x k(x, x')]`, where `L` is the
//! infinitesimal generator of the diffusion and `k` a Gaussian kernel. The
//! objective is zero exactly when the data distribution is stationary for the
//! model, and it is differentiable in the model parameters without simulating
//! the SDE.
//!
//! The crate is organized around that objective:
//!
//! - [`kernel`] — Gaussian kernel and the closed-form cross-derivative
//!   quantities (up to fourth order) that the generator bilinear form needs.
//! - [`models`] — linear and MLP drift parameterizations, constant diagonal
//!   diffusions, shift-scale interventions, and parameter vector-Jacobian
//!   products.
//! - [`kds`] — the generator bilinear form, quadratic and linear-time
//!   unbiased estimators, analytic parameter gradients, and a quadrature
//!   oracle for Gaussian targets.
//! - [`trainer`] — joint gradient-based learning of the shared model and
//!   per-environment intervention shifts with group-lasso sparsity.
//! - [`simulate`] — Euler-Maruyama stationary sampling and the exact
//!   Lyapunov-equation oracle for linear systems.
//! - [`datagen`] — random stable cyclic linear benchmark systems with shift
//!   interventions, plus the on-disk task bundle format.
//! - [`eval`] — entropic Wasserstein and mean-MSE metrics with test-time
//!   shift calibration.
//! - [`cli`] — the `statdiff` command line front end (`generate`, `train`,
//!   `evaluate`, `predict`, `benchmark`, `fig2`).
//!
//! The `examples/` directory contains one runnable example per capability;
//! start with `ou_stationarity` and `train_ou_recovery`.

use thiserror::Error;

pub mod cli;
pub mod datagen;
pub mod eval;
pub mod io;
pub mod kds;
pub mod kernel;
pub mod models;
pub mod simulate;
pub mod trainer;

/// Crate-wide error type.
///
/// The CLI maps these onto process exit codes: configuration and usage errors
/// exit with 2, numeric failures (divergence, non-finite losses, failed
/// calibration) with 3, and I/O or format errors with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator undefined: need at least 2 samples, got {0}")]
    EstimatorUndefined(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("simulation diverged at step {step}: sup-norm {sup_norm:.3e} exceeds {threshold:.1e}")]
    Divergence {
        step: usize,
        sup_norm: f64,
        threshold: f64,
    },

    #[error("system has no stationary law: spectral abscissa {0:.6} is not negative")]
    NoStationaryLaw(f64),

    #[error("non-finite loss at step {step} (environment {environment}): {detail}")]
    NonFinite {
        step: usize,
        environment: usize,
        detail: String,
    },

    #[error(
        "shift calibration failed for coordinate {target}: no bracket within |delta| <= {limit}"
    )]
    CalibrationFailure { target: usize, limit: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI (2 config, 3 numeric, 4 io).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Domain(_)
            | Error::EstimatorUndefined(_)
            | Error::Unsupported(_) => 2,
            Error::Divergence { .. }
            | Error::NoStationaryLaw(_)
            | Error::NonFinite { .. }
            | Error::CalibrationFailure { .. } => 3,
            Error::MissingData(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 4,
        }
    }
}
