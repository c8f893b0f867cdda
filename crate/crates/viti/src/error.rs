//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum VitiError {
    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad user-supplied configuration (span out of range, beta <= 0, ...).
    #[error("configuration error in `{key}`: {message}")]
    Config {
        /// Name of the offending key or parameter.
        key: String,
        /// What went wrong.
        message: String,
    },

    /// Invalid input data (empty prompt, too few tokens, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Training failed (divergence, single-class data, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Dataset is missing required records.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Artifacts built against different model configs.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// File has wrong magic bytes or an unsupported format version.
    #[error("format version error: {0}")]
    Version(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON artifact.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VitiError {
    /// Shorthand for a configuration error.
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        VitiError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, VitiError>;
