//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps variants onto
//! process exit codes (config = 2, generation = 3, ingestion = 4, missing
//! artifact = 5, everything else = 1).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (non-scalar loss, missing branch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A precondition on an argument failed (eps <= 0, empty sequence, ...).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Graph structure is invalid (bad node id, self-loop, duplicate edge).
    #[error("invalid graph: {0}")]
    GraphValidation(String),

    /// A node or index is out of range.
    #[error("index out of range: {0}")]
    Range(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Synthetic data generation failed.
    #[error("generation error: {0}")]
    Generation(String),

    /// A dataset file is missing or malformed.
    #[error("ingestion error in {file}:{line}: {msg}")]
    Ingestion {
        file: String,
        line: usize,
        msg: String,
    },

    /// A required artifact (checkpoint, manifest, ...) does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Training aborted (NaN gradient, degenerate data).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Generation(_) => 3,
            Error::Ingestion { .. } => 4,
            Error::MissingArtifact(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
