use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: malformed manifest line: {message}")]
    ManifestLine { path: PathBuf, line: usize, message: String },

    #[error("unknown language code {0}")]
    UnknownLanguage(String),

    #[error("manifest record {id}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape { context: String, expected: String, got: String },

    #[error("tokenizer error: {0}")]
    Tokenize(String),

    #[error("task construction error: {0}")]
    Task(String),

    #[error("curriculum error: {0}")]
    Curriculum(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("io error at {path}: {source}")]
    IoAt { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), expected: expected.into(), got: got.into() }
    }

    pub fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }
}
