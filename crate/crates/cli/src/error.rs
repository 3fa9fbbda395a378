use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },

    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },

    #[error("invalid config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("invalid dataset {}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] symode_core::Error),

    #[error("internal error: {0}")]
    Internal(String),

    /// The command ran to completion but its checks did not pass.
    #[error("{0}")]
    CheckFailed(String),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::CheckFailed(_) | CliError::Internal(_) => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        }
    }
}
