//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction, ops and the backward pass.
#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward called on a consumed graph")]
    GraphConsumed,
    #[error("backward root has no recorded graph")]
    NoGraph,
    #[error("ctc target of length {target_len} is infeasible for {frames} frames")]
    CtcInfeasible { frames: usize, target_len: usize },
}

/// Crate-wide error, carrying enough structure for the CLI exit-code mapping.
#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
