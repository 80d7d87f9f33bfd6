use thiserror::Error;

/// Errors surfaced by model construction, evaluation, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A model parameter violates a constructor invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A channel schedule produced or was given an unusable mean.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// An argument lies outside the domain of the requested operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimension mismatch between a vector argument and the model.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A sample window was empty where at least one batch is required.
    #[error("empty sample window")]
    EmptyWindow,

    /// A numerical operation failed (non-finite value, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("no convergence within {0} iterations")]
    IterationCap(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
