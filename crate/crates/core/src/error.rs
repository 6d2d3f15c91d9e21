//! Error types shared across the library.

use thiserror::Error;

/// Errors raised by tensor ops, model forward passes, tasks and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: expected scalar, got {numel} elements")]
    NotScalar { op: &'static str, numel: usize },

    #[error("cross_entropy: loss mask selects no positions")]
    EmptyMask,

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("select_hard: row {row} has no unmasked entry")]
    AllMasked { row: usize },

    #[error("task layout overflow: {detail}")]
    LayoutOverflow { detail: String },

    #[error("task row does not follow the generator layout: {detail}")]
    TaskFormat { detail: String },

    #[error("invalid config: {detail}")]
    InvalidConfig { detail: String },

    #[error("scaling report needs at least 2 distinct sequence lengths per model, got {got}")]
    InsufficientData { got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Checkpoint file errors. Each corruption mode gets its own variant so the
/// CLI can report exactly which field failed.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"PTRC\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0} (supported: 1)")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint while reading {field}")]
    Truncated { field: &'static str },

    #[error("invalid tensor name: {0}")]
    BadName(String),

    #[error("config blob is not valid JSON: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
