use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the kind of failure so that a driver can map them
/// onto process exit codes without inspecting messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {key}: {message}")]
    Config { key: String, message: String },

    #[error("length error: sequence of {len} tokens exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("coverage error: position {0} is not covered by any window")]
    Coverage(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn shape(a: &[usize], b: &[usize], what: &str) -> Self {
        Error::Shape(format!("{what}: {a:?} vs {b:?}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
