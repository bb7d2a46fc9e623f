use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {kind} `{name}`")]
    UnknownSymbol { kind: &'static str, name: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("unknown state key {0}")]
    UnknownKey(String),

    #[error("invalid world definition: {0}")]
    World(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss {value} at step {step}: {context}")]
    NonFinite {
        value: f64,
        step: usize,
        context: String,
    },

    #[error("no eligible action to sample")]
    Exhausted,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero vector has no direction (cosine undefined)")]
    ZeroVector,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn artifact(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
