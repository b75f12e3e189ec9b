use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid function mismatch: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("coefficients rejected: {0}")]
    Coefficients(String),
    #[error("weight function not admissible: {0}")]
    Inadmissible(String),
    #[error("manufactured case rejected: {0}")]
    Rejected(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("configuration invalid: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("output directory {path}: {source}")]
    Output { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
