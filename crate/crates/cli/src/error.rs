//! Error surface of the driver: every failure is printed as one JSON object
//! with a machine-readable kind and a human-readable message.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] bctlab::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(_) => "core",
            CliError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
