use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session `{0}` not found")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Validation(String),

    #[error("pool exhausted")]
    Exhausted,

    /// A logged event disagrees with the state it is applied to.
    #[error("event log inconsistent at event {index}: {message}")]
    Replay { index: usize, message: String },

    #[error("event log line {line}: {message}")]
    Log { line: usize, message: String },

    #[error(transparent)]
    Engine(#[from] active_measure::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        use active_measure::Error as E;
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation",
            ServiceError::Exhausted => "exhausted",
            ServiceError::Replay { .. } | ServiceError::Log { .. } => "corrupt_log",
            ServiceError::Engine(e) => match e {
                E::Exhausted(_) => "exhausted",
                E::State(_) | E::Sequencing { .. } => "conflict",
                E::Io(_) => "internal",
                _ => "validation",
            },
            ServiceError::Io(_) | ServiceError::Json(_) => "internal",
        }
    }
}
