//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto process exit codes:
/// usage problems exit 1, data/format problems exit 2, numeric failures
/// exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix shapes, naming both operands.
    #[error("shape mismatch: {op} on {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A clip with zero timesteps where at least one is required.
    #[error("empty clip: {0}")]
    EmptyClip(String),

    /// Invalid run or decode configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or unreadable input data (annotation JSON, TSPF, triple store).
    #[error("data error: {0}")]
    Data(String),

    /// Frame/subtitle temporal alignment violation.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Prediction/gold id sets do not line up.
    #[error("id mismatch: {0}")]
    IdMismatch(String),

    /// Non-finite loss, failed gradient check, or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for data/format errors, 3 for
    /// numeric failures, 1 for everything else (usage).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_)
            | Error::Alignment(_)
            | Error::IdMismatch(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
