use thiserror::Error;

/// Errors raised across the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("divergence at path {path}, step {step}: {detail}")]
    Divergence {
        path: usize,
        step: usize,
        detail: String,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e}); change trajectory {trajectory:?}")]
    Convergence {
        iterations: usize,
        residual: f64,
        trajectory: Vec<f64>,
    },

    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),

    #[error("configuration error: {0}")]
    Configuration(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
