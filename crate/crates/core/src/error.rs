use thiserror::Error;

/// Errors raised by fitting, ingestion and the experiment drivers.
#[derive(Debug, Error)]
pub enum EivError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("model is not identifiable: {0}")]
    Unidentifiable(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{skipped} of {total} replicates skipped as unidentifiable (limit is 10%)")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EivError {
    /// Process exit code used by the command-line tool for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            EivError::Unidentifiable(_) | EivError::NotPositiveDefinite(_) => 2,
            EivError::TooManySkipped { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, EivError>;
