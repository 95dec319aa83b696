use thiserror::Error;

/// Errors produced anywhere in the extraction, alignment and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    /// A channel (or path response) with zero energy was handed to an operation
    /// that needs a nonzero reference.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("artifact digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::DigestMismatch { .. } => 2,
            Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::CorruptData(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Degenerate(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
