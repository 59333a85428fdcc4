//! Error type shared by every module of the crate.

use std::io;

/// Errors raised by kernels, model handling, injection and campaign code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not agree with what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Integer tensor without quantization parameters, or float tensor with them.
    #[error("quantization parameters: {0}")]
    Quant(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Batch-norm variance plus epsilon is not strictly positive.
    #[error("batch norm channel {channel}: var + eps = {value} is not positive")]
    NonPositiveVariance { channel: usize, value: f32 },

    /// The model graph violates a structural invariant.
    #[error("invalid model graph: {0}")]
    Graph(String),

    /// A fault location does not address an element of the model.
    #[error("invalid fault location: {0}")]
    InvalidLocation(String),

    /// A fault is already active on this model view.
    #[error("a fault is already active at {0}; revert it first")]
    FaultActive(String),

    /// `revert` was called with a handle that is not the active fault.
    #[error("no matching active fault to revert")]
    NoActiveFault,

    /// Model or tensor file is truncated or fails its checksum.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// File was written by an incompatible format version.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    /// Campaign configuration is invalid.
    #[error("invalid campaign config: {0}")]
    Config(String),

    /// Nothing to inject into after applying the kind/layer/bit filters.
    #[error("empty fault space: {0}")]
    EmptyFaultSpace(String),

    /// Aggregation or comparison over an empty set.
    #[error("empty input: {0}")]
    Empty(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
