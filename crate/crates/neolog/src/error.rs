//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: cannot build a vocabulary from no text")]
    EmptyCorpus,

    #[error("out-of-vocabulary word: {0:?}")]
    UnknownWord(String),

    #[error("unknown token id {0}")]
    UnknownId(u32),

    #[error("duplicate surface {0:?} already in vocabulary")]
    DuplicateSurface(String),

    #[error("surface {0:?} is encodable from the corpus alphabet; a new word must contain at least one sigil character outside it")]
    SurfaceNotNovel(String),

    #[error("sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("prefix must begin with the BOS token")]
    MissingBos,

    #[error("response contains a neologism id ({0}); responses must be base-vocabulary only")]
    NeologismInResponse(u32),

    #[error("prompt does not contain the neologism id {0}")]
    NeologismMissingFromPrompt(u32),

    #[error("prompt contains neologism id {id} {count} times; expected exactly once")]
    NeologismCount { id: u32, count: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate preference pair: chosen and rejected responses are identical")]
    DegeneratePair,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("no parseable guesses: refusal rate 1.0")]
    AllUnparseable,

    #[error("neologism {0:?} not present in registry")]
    NotInRegistry(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn malformed(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
