use thiserror::Error;

use crate::engine::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    CsvParse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("fit error: {0}")]
    Fit(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no unlabeled candidates left")]
    Exhausted,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("could not parse proposal: {0}")]
    Proposal(String),

    #[error("client error: {0}")]
    Client(#[from] ClientError),

    #[error("proposer error: {0}")]
    Proposer(String),

    #[error("run aborted after {} steps: {reason}", partial.steps.len())]
    Aborted {
        partial: Box<Trajectory>,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failures of chat and rerank clients. Only `Transport` is worth retrying.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),

    #[error("scripted client exhausted after {0} responses")]
    Exhausted(usize),

    #[error("request digest mismatch at response {index}: fixture {expected}, request {actual}")]
    DigestMismatch {
        index: usize,
        expected: String,
        actual: String,
    },

    #[error("malformed response: {0}")]
    Malformed(String),

    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}
