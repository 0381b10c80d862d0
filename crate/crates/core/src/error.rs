//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape contract violated (e.g. matmul inner-dimension mismatch).
    #[error("dimension error in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// API precondition violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value or other numerical failure.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Input is degenerate for the requested operation (e.g. zero vector fed
    /// to the spherical quantizer).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Byte-level parse failure with the offset where it was detected.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A command needs an artifact produced by an earlier command.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// Training did not reach its required quality bar.
    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dim { op, details: details.into() }
    }
}
