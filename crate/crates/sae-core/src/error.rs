use thiserror::Error;

/// Error type shared across the estimation pipeline.
#[derive(Debug, Error)]
pub enum SaeError {
    /// Malformed input file (CSV/JSON), with location when known.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Input violates a documented invariant (bad weight, cluster spanning
    /// strata, region id outside the graph, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Numerical failure (singular precision, non-PSD covariance, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Caller asked for something the requested model/operation cannot do.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SaeError {
    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        SaeError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        SaeError::Validation(message.into())
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        SaeError::Numerical(message.into())
    }

    pub fn usage(message: impl Into<String>) -> Self {
        SaeError::Usage(message.into())
    }
}

pub type Result<T> = std::result::Result<T, SaeError>;
