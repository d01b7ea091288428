//! Batch commands behind the `chainforge` binary.

pub mod commands;
pub mod config;
pub mod wiring;

pub use config::RunConfig;

/// Exit status: 0 success, 2 configuration error, 3 runtime error, 4
/// threshold breach.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("GroupIncomplete: missing chains {}", .0.join(", "))]
    GroupIncomplete(Vec<String>),
    #[error("threshold breached: {0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::GroupIncomplete(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
