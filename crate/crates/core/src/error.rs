use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure in {stage} at index {index}")]
    Numerical { stage: &'static str, index: usize },
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("training diverged: {0}")]
    Training(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Validation(msg.into()))
}
