use std::path::PathBuf;

use thiserror::Error;

use crate::lm::LmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selection,
    Knowledge,
    Response,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Selection => "selection",
            Stage::Knowledge => "knowledge",
            Stage::Response => "response",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },

    #[error("{0}: corpus is empty")]
    EmptyCorpus(String),

    #[error("invalid sample {id:?}: {message}")]
    InvalidSample { id: String, message: String },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("encoder mismatch: index built with {index:?}, query embedded with {query:?}")]
    EncoderMismatch { index: String, query: String },

    #[error("n = {n} out of range 1..={max}")]
    OutOfRange { n: usize, max: usize },

    #[error("non-finite embedding value at position {0}")]
    NonFinite(usize),

    #[error("index does not match corpus: {0}")]
    IndexMismatch(String),

    #[error("response exemplar pool is empty for overlap range [{low}, {high}]; widen the thresholds")]
    EmptyPool { low: f64, high: f64 },

    #[error("need {needed} samples but only {available} are available")]
    NotEnoughSamples { needed: usize, available: usize },

    #[error("embedding provider: {0}")]
    Embedding(String),

    #[error("{stage} stage: {source}")]
    Lm {
        stage: Stage,
        #[source]
        source: LmError,
    },

    #[error(transparent)]
    LmDirect(#[from] LmError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Provider,
    Validation,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Io { .. } => ErrorKind::Config,
            Error::Embedding(_) | Error::Lm { .. } | Error::LmDirect(_) => ErrorKind::Provider,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
