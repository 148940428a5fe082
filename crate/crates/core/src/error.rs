//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("attention mask row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("softmax input contains NaN")]
    NanInput,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("target {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("gradient for parameter '{param}' is not finite")]
    NanGradient { param: String },
    #[error("training diverged: loss is not finite at stage {stage} step {step}")]
    Diverged { stage: u8, step: usize },
    #[error("parameter '{0}' registered twice on one tape")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("step has no candidate elements")]
    NoCandidates,
    #[error("{got} histories exceed the configured maximum {max}")]
    TooManyHistories { got: usize, max: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("summarizer transport failed: {0}")]
    TransportFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Message(String),
}

pub type Result<T> = std::result::Result<T, Error>;
