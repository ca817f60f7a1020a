use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error(
        "enumeration of {size} joint hypotheses exceeds the cap of {cap}; \
         use the neural conditional-mean approximator for this channel size"
    )]
    EnumerationCap { size: u128, cap: usize },

    #[error("solver did not converge after {iterations} iterations (residuals: mean {mean_residual:e}, second moment {second_residual:e})")]
    NonConvergence {
        iterations: usize,
        mean_residual: f64,
        second_residual: f64,
    },

    #[error("could not bracket the maximizing temperature (last lower end {last_lower:e})")]
    BracketFailure { last_lower: f64 },

    #[error("residual covariance is singular or not positive definite")]
    SingularCovariance,

    #[error("training diverged at epoch {epoch}; loss trace {trace:?}")]
    Divergence { epoch: usize, trace: Vec<f64> },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
