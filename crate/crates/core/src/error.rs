use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance is outside the grammar: '{0}'")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("word '{0}' is already in the vocabulary")]
    DuplicateWord(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
