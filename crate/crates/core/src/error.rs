use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pinyin chunk {chunk:?}: {reason}")]
    InvalidChunk { chunk: String, reason: String },

    #[error("key {key:?} is not on the {layout} layout")]
    InvalidKey { key: char, layout: &'static str },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{kind} not found: {what}")]
    NotFound { kind: &'static str, what: String },

    #[error("zero-probability event: {0}")]
    ZeroProbability(String),

    #[error("no pinyin segmentation covers input {0:?}")]
    EmptyLattice(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
