use thiserror::Error;

/// Errors across the pipeline. `Argument`, `Config`, `Format`, and
/// `Validation` are caller-input problems (CLI exit code 2); `Io` and
/// `Runtime` are execution failures (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    /// Whether this error reflects bad caller input rather than a failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_) | Error::Config(_) | Error::Format(_) | Error::Validation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
