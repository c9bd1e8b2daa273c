use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("natural-gradient step rejected after {halvings} halvings")]
    StepRejected { halvings: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{module} failed at iteration {iteration}: {source}")]
    AtIteration {
        module: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the configuration or input files rather than by
    /// numerics or the environment.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Schema(_)
            | Error::Shape(_)
            | Error::InvalidParameter(_)
            | Error::InvalidMode(_)
            | Error::Parse { .. }
            | Error::Json(_) => true,
            Error::AtIteration { source, .. } => source.is_config(),
            _ => false,
        }
    }

    /// True for failures of the numerics (as opposed to configuration or I/O).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. } | Error::StepRejected { .. } | Error::NonFinite(_) => true,
            Error::AtIteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
