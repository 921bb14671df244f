use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum AceError {
    #[error("sequence complete: all {0} agents have already acted")]
    SequenceComplete(usize),
    #[error("illegal action {action} (action space has {space} ids)")]
    IllegalAction { action: usize, space: usize },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("episode finished")]
    EpisodeFinished,
    #[error("infeasible start constraint: no placement with spider-fly distance > {0}")]
    InfeasibleStart(u32),
    #[error("state space too large: {states} states exceeds guard {limit}")]
    StateSpaceTooLarge { states: usize, limit: usize },
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no cached activations for backward")]
    NoCache,
    #[error("divergence detected: {0}")]
    Divergence(String),
    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("empty legal action set")]
    EmptyActionSet,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path} line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AceError> = std::result::Result<T, E>;
