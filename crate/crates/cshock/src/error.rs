use thiserror::Error;

pub type Result<T> = std::result::Result<T, CshockError>;

#[derive(Debug, Error)]
pub enum CshockError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CshockError {
    /// Stable exit-code contract: 0 success, 1 usage, 2 data error,
    /// 3 numerical abort. Usage errors are produced by the CLI parser,
    /// so everything here maps to 2 or 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            CshockError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
