use thiserror::Error;
use widescale::experiment::ExperimentError;
use widescale::narrative::{FactError, NarrativeError};
use widescale::vlm::BackendError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match &e {
            ExperimentError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ExperimentError::Tasks(failures) if failures.iter().any(|f| f.backend) => CliError::Backend(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Backend failures inside a narrative keep their exit code.
pub fn narrative_error(context: impl std::fmt::Display, e: NarrativeError) -> CliError {
    let message = format!("{context}: {e}");
    match e {
        NarrativeError::Step {
            source: FactError::BackendUnavailable(_),
            ..
        } => CliError::Backend(message),
        _ => CliError::Data(message),
    }
}
