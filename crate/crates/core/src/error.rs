use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown split tag {tag:?} on line {line}")]
    UnknownSplit { line: usize, tag: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty vocabulary: no training word occurs at least {min_count} times")]
    EmptyVocabulary { min_count: usize },

    #[error("invalid validation split: {0}")]
    Split(String),

    #[error("class {class:?} has no training sentences")]
    EmptyClass { class: String },

    #[error(
        "embedding dimension {dim} is smaller than the number of connected components {components}"
    )]
    TooFewDimensions { dim: usize, components: usize },

    #[error("eigensolver did not converge: {0}")]
    Eigen(String),

    #[error("class {class} has {available} sentences, need more than {required}")]
    ClassTooSmall {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, sentence {sentence}")]
    NonFiniteLoss { epoch: usize, sentence: usize },

    #[error("sentence is empty after preprocessing and cannot be classified")]
    Unclassifiable,

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
