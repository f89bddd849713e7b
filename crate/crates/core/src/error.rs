use thiserror::Error;

/// Errors raised by the growth-mixture library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid occasions: {0}")]
    Occasions(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("invalid data at row {row}: {msg}")]
    Data { row: usize, msg: String },
    #[error("invalid condition: {0}")]
    Condition(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
