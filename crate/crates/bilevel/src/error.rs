//! Error types shared across the solver and estimator layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BilevelError {
    /// Inner iterates left the finite range (step size too large).
    #[error("inner solve diverged at step {step} (iterate norm {norm:.3e})")]
    InnerDivergence { step: usize, norm: f64 },

    /// A perturbation delta came out non-finite; the smoothing scale is too
    /// small for the working precision.
    #[error("non-finite trajectory difference for perturbation {sample}; smoothing too small")]
    NonFiniteDelta { sample: usize },

    /// The problem does not expose an evaluation the estimator requires.
    #[error("problem does not provide {0}")]
    Unsupported(&'static str),

    /// Linear solve inside AID failed or stalled.
    #[error("linear solver {kind}: {reason} (residual {residual:.3e} after {iters} iterations)")]
    SolverFailure {
        kind: &'static str,
        reason: &'static str,
        residual: f64,
        iters: usize,
    },

    /// Structurally invalid configuration or arguments.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<V> = std::result::Result<V, BilevelError>;
