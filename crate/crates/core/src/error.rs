use thiserror::Error;

/// Errors raised by the measurement engine and its harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("pool mixes records with and without true values (line {line})")]
    MixedMode { line: usize },

    #[error("duplicate unit id `{0}`")]
    Duplicate(String),

    #[error("pool is empty")]
    EmptyPool,

    #[error("unknown unit id `{0}`")]
    UnknownUnit(String),

    #[error("ground truth unavailable: pool is in live mode")]
    Unavailable,

    #[error("invalid value for unit `{unit}`: {value}")]
    InvalidValue { unit: String, value: f64 },

    #[error("no prediction for unlabeled unit `{0}`")]
    Coverage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("weights are singular at step {tau} of a {horizon}-step horizon")]
    Singular { tau: usize, horizon: usize },

    #[error("cannot normalize weights summing to {0}")]
    Normalization(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate variance estimate at step {tau}: {value}")]
    DegenerateVariance { tau: usize, value: f64 },

    #[error("out-of-order update: expected step {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("label rejected for unit `{unit}`: {value}")]
    Label { unit: String, value: f64 },

    #[error("pool exhausted after {0} steps")]
    Exhausted(usize),

    #[error("no estimate available before the first step")]
    NoEstimate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
