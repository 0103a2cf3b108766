//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch sequence")]
    EmptyBatches,
    #[error("sparsity {0} outside [0, 1)")]
    SparsityOutOfRange(f64),
    #[error("mask keeps zero parameters (fully pruned model)")]
    DegenerateMask,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed {format} payload: {reason}")]
    Codec { format: &'static str, reason: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("initialization verification failed for client {client}")]
    InitVerification { client: u32 },
    #[error("protocol misuse: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn codec(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Codec {
            format,
            reason: reason.into(),
        }
    }

    /// True for errors caused by invalid user-supplied configuration or data
    /// sources, as opposed to failures during a run. The CLI maps the former
    /// to exit code 1 and the latter to exit code 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Dataset(_) | Error::InvalidArchitecture(_)
        )
    }
}
