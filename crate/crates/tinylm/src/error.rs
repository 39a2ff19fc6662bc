use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes; names both shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape is structurally invalid for the operation (wrong rank, zero
    /// extent, element count disagreement).
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// An index (token id, tensor id, choice index) is out of range.
    #[error("{what} {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// `backward` called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// The tape has already been backpropagated and accepts no further work.
    #[error("tape is frozen after backward")]
    TapeFrozen,

    /// Cross-entropy over positions that are all ignored.
    #[error("cross_entropy: no valid targets")]
    NoValidTargets,

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Attention cache would exceed the configured context length.
    #[error("attention cache overflow: {requested} positions exceed max_seq_len {max}")]
    CacheOverflow { requested: usize, max: usize },

    /// Invalid input to a forward/generation call.
    #[error("input error: {0}")]
    Input(String),

    /// Tokenizer training cannot proceed.
    #[error("tokenizer training error: {0}")]
    TokenizerTrain(String),

    /// Tokenizer model file violates the format.
    #[error("tokenizer file error (line {line}): {detail}")]
    TokenizerFile { line: usize, detail: String },

    /// Training aborted because the loss or gradients diverged.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Checkpoint file violates the binary format; names the offending field.
    #[error("checkpoint format error in field `{field}`: {detail}")]
    CheckpointFormat { field: &'static str, detail: String },

    /// Task file record is malformed; carries the 1-based line number.
    #[error("task file error at line {line}: {detail}")]
    TaskFile { line: usize, detail: String },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
