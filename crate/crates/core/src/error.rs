use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("format error at byte offset {offset}: {message}")]
    Truncated { offset: u64, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("empty document: {0}")]
    EmptyDocument(String),

    #[error("empty vocabulary: no document contains a token")]
    EmptyVocabulary,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("non-finite value in {tensor}: {detail}")]
    NonFinite { tensor: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short name, used by the command line for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) | Error::Truncated { .. } => "format",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Infeasible(_) => "infeasible",
            Error::EmptyCorpus(_) => "empty-corpus",
            Error::EmptyDocument(_) => "empty-document",
            Error::EmptyVocabulary => "empty-vocabulary",
            Error::NotFound(_) => "not-found",
            Error::UndefinedSimilarity(_) => "undefined-similarity",
            Error::NonFinite { .. } => "non-finite",
        }
    }
}
