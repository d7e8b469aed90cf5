//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid layer, model, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// API contract violation (e.g. backward from a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Malformed text file; `line` is 1-based.
    #[error("format error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Checkpoint does not match the current model configuration.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Invalid input data (empty score set, missing label, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
