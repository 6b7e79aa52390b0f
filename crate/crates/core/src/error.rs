use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy the operation's shape contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value lies outside the domain of the operation (log of a
    /// non-positive number, non-positive depth, zero quaternion, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-side contract was violated (non-scalar loss, wrong tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Not enough samples to fit the requested rank.
    #[error("rank error: need at least {needed} samples, got {got}")]
    Rank { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (bad magic, truncated payload, hash mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("numerical abort at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
