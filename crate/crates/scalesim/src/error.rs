use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter was outside its mathematical domain.
    #[error("parameter domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Cholesky factorization failed; the matrix is not positive-definite.
    #[error("matrix is not symmetric positive-definite: {0}")]
    NotSpd(String),

    #[error("optimization failed to converge: {0}")]
    NonConvergence(String),

    #[error("invalid input data: {0}")]
    InvalidData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }

    pub fn invalid_data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class: 2 for schema/config/data
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidData(_) | Error::Io(_) | Error::Csv(_)
            | Error::Json(_) => 2,
            Error::Domain(_) | Error::DimMismatch(_) | Error::NotSpd(_)
            | Error::NonConvergence(_) => 3,
        }
    }
}
