use std::io;

use thiserror::Error;

/// Process exit code for a run whose checks did not all pass.
pub const EXIT_FAILED: i32 = 1;
/// Process exit code for bad flags, bad config files and unreadable inputs.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] hegnn_core::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config file: {0}")]
    Config(#[from] toml::de::Error),
    #[error("{0} check(s) failed")]
    Failed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => EXIT_FAILED,
            _ => EXIT_USAGE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
