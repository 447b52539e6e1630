use active_measure_service::ServiceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// The experiment or config file could not be read or understood.
    #[error("config {path}: {source}")]
    Config {
        path: String,
        source: active_measure::Error,
    },

    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },

    #[error(transparent)]
    Engine(#[from] active_measure::Error),

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 ok, 1 check failure, 2 usage or config error, 3 I/O error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed { .. } => 1,
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Engine(active_measure::Error::Io(_)) => 3,
            CliError::Engine(_) => 2,
            CliError::Service(ServiceError::Io(_)) => 3,
            CliError::Service(ServiceError::Engine(active_measure::Error::Io(_))) => 3,
            CliError::Service(_) => 2,
        }
    }
}
