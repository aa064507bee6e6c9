use thiserror::Error;

use crate::oracle::{MarginSolution, RegPathPoint};
use crate::pgd::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Best iterate available when an oracle runs out of budget.
#[derive(Debug, Clone)]
pub enum BestSoFar {
    Margin(MarginSolution),
    RegPath(RegPathPoint),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid exponent p = {0}: the potential requires a finite p > 1")]
    InvalidExponent(f64),

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid label {0}: labels must be +1 or -1")]
    InvalidLabel(f64),

    #[error("classifier does not separate the data (margin {margin})")]
    NotSeparating { margin: f64 },

    #[error("data is not linearly separable (best margin found {best_margin})")]
    NotSeparable { best_margin: f64 },

    #[error("exponential loss overflow at sample margin {margin}; the step size is too large")]
    LossOverflow { margin: f64 },

    #[error("optimizer diverged at iteration {iter}: {reason}")]
    Divergence {
        iter: u64,
        reason: String,
        partial: Box<TrainTrace>,
    },

    #[error("solver budget of {iterations} iterations exhausted (certified gap {gap:e})")]
    Timeout {
        iterations: usize,
        gap: f64,
        best: Box<BestSoFar>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
