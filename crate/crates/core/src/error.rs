//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch at index {index}: prediction {pred:?} vs ground truth {gt:?}")]
    MaskShapeMismatch {
        index: usize,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("mask is not binary at ({row},{col}): {value}")]
    NonBinaryMask { row: usize, col: usize, value: f32 },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("object {index} does not fit the canvas ({h}x{w})")]
    ObjectTooLarge { index: usize, h: usize, w: usize },
    #[error("referring expression is ambiguous: {candidates} objects match")]
    AmbiguousExpression { candidates: usize },
    #[error("no attendable reference: all keys invalid")]
    NoValidKeys,
    #[error("empty reference list for fusion")]
    EmptyReferences,
    #[error("top-k: k={k} exceeds query count {n}")]
    TopKExceedsQueries { k: usize, n: usize },
    #[error("empty video")]
    EmptyVideo,
    #[error("empty support set for few-shot segmentation")]
    EmptySupports,
    #[error("task precondition violated: {0}")]
    TaskPrecondition(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("training diverged at step {step} ({task}): non-finite loss; terms: {detail}")]
    NonFiniteLoss {
        step: u64,
        task: String,
        detail: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
