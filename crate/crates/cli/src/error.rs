use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] wmka_core::Error),

    #[error("{0}")]
    Validation(String),

    /// A check ran to completion and failed its tolerance.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 for bad input or configuration, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::Core(wmka_core::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}
