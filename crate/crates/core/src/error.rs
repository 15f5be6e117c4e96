use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::BoundingBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: (usize, usize), actual: (usize, usize) },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate or out-of-bounds box {0} for a {1}x{2} image")]
    DegenerateBox(BoundingBox, u32, u32),

    #[error("token id {token} outside vocabulary of size {vocab}")]
    VocabRange { token: u32, vocab: usize },

    #[error("box string of {len} tokens does not fit padded length {pad_len}")]
    BoxTooLong { len: usize, pad_len: usize },

    #[error("expected a box token sequence of length {expected}, got {actual}")]
    BoxLength { expected: usize, actual: usize },

    #[error("cannot tokenize {0:?}")]
    Tokenize(String),

    #[error("empty token sequence")]
    EmptySequence,

    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),

    #[error("prompt role `{role}` cannot condition a {kind} backbone")]
    RoleMismatch { role: String, kind: String },

    #[error("unscripted context: {0}")]
    Unscripted(String),

    #[error("invalid script: {0}")]
    Script(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("backbone `{0}` is not available in this build")]
    Unavailable(String),

    #[error("{}:{line}: {msg}", path.display())]
    Schema { path: PathBuf, line: usize, msg: String },

    #[error("invalid prompt checkpoint: {0}")]
    Checkpoint(String),

    #[error("backbone parameters changed during adaptation ({before} -> {after})")]
    BackboneMutated { before: String, after: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
