use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("missingness mechanism: {0}")]
    Mechanism(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("imputation failed: {0}")]
    Imputation(String),
    #[error("pooling failed: {0}")]
    Pooling(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
