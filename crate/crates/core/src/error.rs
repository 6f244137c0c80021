use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("no embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("confidences unavailable: predictions carry no probabilities")]
    ConfidenceUnavailable,

    #[error("invalid selection problem: {0}")]
    InvalidProblem(String),

    #[error("infeasible selection for query {query:?}: {reason}")]
    Infeasible { query: String, reason: String },

    #[error("transport error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("scripted backend has no response for prompt hash {0}")]
    ScriptMiss(String),

    #[error("unparseable response: {0:?}")]
    UnparseableResponse(String),

    #[error("no prediction for example {0:?}")]
    MissingPrediction(String),

    #[error("prediction ids do not match dataset (missing: {missing:?}, extra: {extra:?})")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation/config, 2 transport, 3 infeasibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } | Error::Protocol(_) | Error::ScriptMiss(_) => 2,
            Error::Infeasible { .. } => 3,
            _ => 1,
        }
    }
}
