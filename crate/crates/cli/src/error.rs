use ssvi::checkpoint::CheckpointError;
use ssvi::config::ConfigError;
use ssvi::data::DataError;
use ssvi::trainer::TrainError;
use thiserror::Error;

/// Failure categories with fixed exit codes, so sweep drivers can classify
/// legs without parsing messages.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Grid(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Grid(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Checkpoint(_) | CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config-invalid",
            CliError::Grid(_) => "grid-invalid",
            CliError::Data(_) => "data-missing",
            CliError::Numerical(_) => "numerical-abort",
            CliError::Checkpoint(_) => "checkpoint-corrupt",
            CliError::Io(_) => "io",
            CliError::Internal(_) => "internal",
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Checkpoint(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
