//! Experiment harness: configuration, the per-method runner and the
//! `couq` subcommands.

pub mod commands;
pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Method};

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<couq_core::Error> for CliError {
    fn from(e: couq_core::Error) -> Self {
        use couq_core::Error as E;
        match e {
            E::Schedule(_) => CliError::Config(e.to_string()),
            E::Format(_) | E::Dimension { .. } | E::Data { .. } | E::InvalidData(_) | E::InsufficientData { .. } | E::Csv(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
