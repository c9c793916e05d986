//! Probabilistically robust conformal prediction.
//!
//! Split conformal prediction produces prediction sets with a distribution-free
//! marginal coverage guarantee, but the guarantee evaporates as soon as test
//! inputs are perturbed. This crate implements three calibration strategies that
//! restore coverage under norm-bounded perturbations `‖ε‖₂ ≤ r`:
//!
//! * **Vanilla CP**: the plain split-conformal quantile rule, as a baseline.
//! * **Inflated thresholds**: add a score-inflation constant `M_r` (worst-case)
//!   or `M_{r,η}` (high-probability) to the clean quantile.
//! * **Quantile-of-quantile calibration**: for each calibration example, take an
//!   inner `(1−α̃)`-quantile of its score over `m` random perturbations, then an
//!   outer `⌈(n+1)(1−α+s)⌉`-th order statistic over examples. The inner and outer
//!   levels are coupled through `α̃ = 1 − (1−α)/(1−α+s)` so that the product of
//!   the two coverage levels equals the `1−α` target.
//!
//! Around the calibrators sit the supporting pieces: non-conformity scores
//! ([`scores`]), perturbation samplers ([`noise`]), an order-statistic quantile
//! engine with a concentration bound ([`quantile`]), a synthetic softmax
//! classifier with analytic inflation bounds ([`classifier`]), a projected
//! gradient adversary ([`adversary`]), and a seeded evaluation harness
//! ([`eval`]). The [`cli`] module exposes all of it as a command-line tool.
//!
//! Everything is deterministic given an explicit seed: parallel sections derive
//! per-index sub-seeds, so results do not depend on thread count.

pub mod adversary;
pub mod calibrate;
pub mod classifier;
pub mod cli;
pub mod eval;
pub mod noise;
pub mod quantile;
pub mod scores;

mod seed;

pub use seed::{subseed, Stage};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    /// A class label is outside `[0, C)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A probability vector fails validation.
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    /// Two collections that must agree in length do not.
    #[error("shape mismatch: {message} ({left} vs {right})")]
    ShapeMismatch {
        message: &'static str,
        left: usize,
        right: usize,
    },

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Rejection sampling cannot make progress.
    #[error(
        "gaussian-in-ball acceptance rate {rate:.2e} below {floor:.0e} over a {probe}-draw probe; \
         sigma {sigma} is far too large for radius {radius}"
    )]
    AcceptanceTooLow {
        rate: f64,
        floor: f64,
        probe: usize,
        sigma: f64,
        radius: f64,
    },

    /// The requested score kind is not supported by this operation.
    #[error("unsupported score kind for {operation}: {detail}")]
    UnsupportedScoreKind {
        operation: &'static str,
        detail: &'static str,
    },

    /// Brute-force search is restricted to low dimension.
    #[error("dimension {dim} too high for exhaustive search (max {max})")]
    DimensionTooHigh { dim: usize, max: usize },

    /// Cross-domain density gap exceeds the available slack.
    #[error(
        "density gap {gap} exceeds the inner-level slack: adjusted level would be {adjusted:.6}"
    )]
    InfeasibleDensityGap { gap: f64, adjusted: f64 },

    /// File or directory I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A data file failed to parse or validate.
    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    /// Process exit code category used by the CLI: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. }
            | Error::UnsupportedScoreKind { .. }
            | Error::InfeasibleDensityGap { .. } => 2,
            Error::Io { .. }
            | Error::Data { .. }
            | Error::InvalidProbabilities(_)
            | Error::LabelOutOfRange { .. }
            | Error::ShapeMismatch { .. } => 3,
            Error::EmptyInput(_)
            | Error::AcceptanceTooLow { .. }
            | Error::DimensionTooHigh { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
