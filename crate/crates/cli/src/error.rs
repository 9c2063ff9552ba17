use setrisk_core::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    /// Bad flags, missing required settings or an unreadable manifest.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::Numerical(_) | Error::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
