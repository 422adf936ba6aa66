use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: {0}")]
    InputShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky factorization failed (last jitter tried: {jitter:e})")]
    Numerical { jitter: f64 },

    #[error("numerical failure: {0}")]
    NumericalOther(String),

    #[error("hyperparameter optimization failed on every start: {}", .0.join("; "))]
    OptimizationFailed(Vec<String>),

    #[error("importance sample {index} failed twice: {reason}")]
    SampleFailure { index: usize, reason: String },

    #[error("{failed} of {total} importance samples failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("problem too large: {0}")]
    Size(String),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by floating point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::NumericalOther(_)
                | Error::OptimizationFailed(_)
                | Error::SampleFailure { .. }
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
