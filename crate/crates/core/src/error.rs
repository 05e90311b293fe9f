use thiserror::Error;

use crate::types::DurationViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid durations: {0}")]
    Duration(#[from] DurationViolation),

    #[error("no valid alignment: {frames} super-frames cannot hold {tokens} tokens with max duration {max_duration}")]
    Infeasible {
        frames: usize,
        tokens: usize,
        max_duration: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("malformed alignment: {0}")]
    MalformedAlignment(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("instance too large to enumerate: {count} alignments exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
