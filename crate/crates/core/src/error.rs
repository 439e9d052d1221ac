use thiserror::Error;

/// Errors surfaced by the registration library.
#[derive(Debug, Error)]
pub enum RegError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty problem: at least {needed} measurements required, got {got}")]
    TooFewMeasurements { needed: usize, got: usize },

    #[error("insufficient inliers: maximum clique has {found} vertices, need at least 3")]
    InsufficientInliers { found: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RegError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RegError {
    RegError::InvalidInput(msg.into())
}
