//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MegError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, truncated payload, unparseable row).
    #[error("format error: {0}")]
    Format(String),

    /// Dimension or shape disagreement between inputs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on arguments or configuration was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Failure while executing an otherwise well-formed job.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl MegError {
    /// Exit code the CLI maps this error to: 1 for validation problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MegError::Format(_) | MegError::Shape(_) | MegError::Invalid(_) => 1,
            MegError::Io(_) | MegError::NonFinite(_) | MegError::Runtime(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MegError>;
