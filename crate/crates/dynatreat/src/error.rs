use std::fmt;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input or configuration failed validation.
    #[error("validation error: {0}")]
    Validation(String),
    /// An iterative solver stopped before meeting its tolerance.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
    },
    /// Training parameters left the finite/bounded region.
    #[error("divergence at update {update}: {reason}")]
    Divergence { update: u64, reason: String },
    /// A non-finite quantity appeared mid-computation.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Enumeration would exceed the configured branch cap.
    #[error("enumeration needs {needed} branches, limit is {limit}")]
    TooLarge { needed: f64, limit: f64 },
    /// A worker thread panicked.
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl fmt::Display) -> Error {
    Error::Validation(msg.to_string())
}
