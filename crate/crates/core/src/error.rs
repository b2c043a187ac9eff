use std::path::PathBuf;

/// Errors produced by the lab's numerical and I/O routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A logit table entry was NaN or infinite.
    #[error("non-finite score in context {context}")]
    NonFiniteScore { context: String },

    /// Vocabulary must contain at least two actions.
    #[error("vocabulary size must be >= 2, got {0}")]
    InvalidVocab(usize),

    /// A context is not valid for the table it was used with.
    #[error("invalid context {context}: {reason}")]
    InvalidContext { context: String, reason: String },

    /// An argument violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Lengths of paired inputs disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A batch or sequence without any masked-in token reached a loss.
    #[error("empty batch: {0}")]
    EmptyBatch(String),

    /// A scalar function or log-probability evaluated to NaN/inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Exact enumeration would exceed the configured context budget.
    #[error("enumeration needs {needed} contexts, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: usize },

    /// Experiment or checkpoint configuration is malformed.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint or metrics file could not be parsed.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Filesystem failure, reported with the offending path.
    #[error("I/O error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
