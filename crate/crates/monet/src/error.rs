//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum MonetError {
    #[error("{layer}: shape mismatch, expected {expected} got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("patch index out of range: scale {scale} row {row} col {col} (grid {grid})")]
    PatchOutOfRange {
        scale: u32,
        row: usize,
        col: usize,
        grid: usize,
    },

    #[error("patch scales differ: {a} vs {b}")]
    ScaleMismatch { a: u32, b: u32 },

    #[error("patch at scale {scale} has no children (minimum scale)")]
    NoChildren { scale: u32 },

    #[error("non-finite gradient in parameter block '{block}'")]
    NonFiniteGradient { block: String },

    #[error("invalid triplet: positive overlap {o_plus} must exceed negative overlap {o_minus}")]
    InvalidTriplet { o_plus: u64, o_minus: u64 },

    #[error("no argmax partner recorded for compared patch at scale {scale} ({row}, {col})")]
    MissingArgmax { scale: u32, row: usize, col: usize },

    #[error("empty {0} stream")]
    EmptyStream(&'static str),

    #[error("duplication region {w}x{h} at ({x}, {y}) does not fit in a {n}x{n} image")]
    RegionOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        n: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation sample '{sample}': {message}")]
    EvalSample { sample: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MonetError>;
