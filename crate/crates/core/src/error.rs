use std::path::PathBuf;

/// Errors surfaced by the deduplication engine.
///
/// Shape mismatches inside the autodiff graph are programming errors and
/// panic instead; everything that can be triggered by user input or on-disk
/// state goes through this enum.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed dataset line. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Dataset-level problem (too few reports, missing labels, bad split).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Tokenizer construction or vocabulary problem.
    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    /// Model configuration or input problem (empty trace, dim mismatch).
    #[error("model error: {0}")]
    Model(String),

    /// Embedding store or search index problem.
    #[error("index error: {0}")]
    Index(String),

    /// Evaluation harness problem (unlabelled test report, empty segment).
    #[error("eval error: {0}")]
    Eval(String),

    /// Remote embedding service failure after retries.
    #[error("remote embedding error: {0}")]
    Remote(String),

    /// Persisted artifact is missing, corrupt, or has the wrong version.
    #[error("artifact error in {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn artifact(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Artifact { path: path.into(), message: message.into() }
    }
}
