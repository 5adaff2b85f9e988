use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: dialogue {dialogue_id:?}: field `{field}`: {message}")]
    Validation {
        line: usize,
        dialogue_id: Option<String>,
        field: String,
        message: String,
    },

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence too short for window: {len} embeddings, window {window}")]
    SequenceTooShort { len: usize, window: usize },

    #[error("empty {0} lengths")]
    EmptyLengths(&'static str),

    #[error("zero mean {0} length")]
    ZeroMeanLength(&'static str),

    #[error("no target tokens")]
    NoTargetTokens,

    #[error("block {0}: target turn missing from reward trace")]
    MissingTraceEntry(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("malformed block record {block_id}: {message}")]
    MalformedBlock { block_id: String, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
