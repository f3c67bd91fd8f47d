//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector dimensions do not line up.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A computation produced or received a non-finite value.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// CSV ingestion failed; `line` is 1-based and includes the header row.
    #[error("ingest error at line {line}: {detail}")]
    Ingest { line: u64, detail: String },

    /// Invalid configuration or unusable experiment setup.
    #[error("config error: {0}")]
    Config(String),

    /// Covariate-driven expert selection could not resolve an index.
    /// Callers treat this as a signal to fall back, never as a fatal abort.
    #[error("routing error: {0}")]
    Routing(String),

    /// Training diverged or was asked to do something inconsistent.
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// An evaluation or ablation harness precondition failed.
    #[error("harness error: {0}")]
    Harness(String),

    /// The federated protocol state machine was violated.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A checkpoint is corrupt or does not match its manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }
}
