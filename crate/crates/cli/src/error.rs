use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] damm_core::Error),

    #[error("{0}")]
    Usage(String),

    /// A check ran to completion and found a problem.
    #[error("{0}")]
    CheckFailed(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;
