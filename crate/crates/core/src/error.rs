use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("instruction pool has {available} eligible entries, {requested} exemplars requested")]
    PoolTooSmall { available: usize, requested: usize },

    #[error("at least 2 candidates are required, got {0}")]
    TooFewCandidates(usize),

    #[error("instruction does not decode to a task")]
    Undecodable,

    #[error("{0} has zero variance; correlation is undefined")]
    ZeroVariance(&'static str),

    #[error("step {step} outside schedule of {total_steps} steps")]
    StepOutOfRange { step: usize, total_steps: usize },

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error(
        "iteration {iteration}: produced {produced} of {wanted} pairs within {attempts} instruction attempts"
    )]
    GenerationBudget {
        iteration: usize,
        produced: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Manifest(_) | Error::MissingArtifact(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
