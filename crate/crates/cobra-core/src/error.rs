//! Error types shared across the crate.

use thiserror::Error;

/// Errors from the numeric core (SSM, blocks, projectors, backbone).
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Errors from the binary weight/feature container and image readers.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected \"CSSM\"")]
    BadMagic { offset: usize },
    #[error("unsupported container version {version} at offset {offset}")]
    BadVersion { version: u32, offset: usize },
    #[error("truncated file at offset {offset}: {context}")]
    Truncated { offset: usize, context: String },
    #[error("invalid entry at offset {offset}: {context}")]
    InvalidEntry { offset: usize, context: String },
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name:?} has shape {got:?}, expected {expected}")]
    BadShape {
        name: String,
        got: Vec<u64>,
        expected: String,
    },
    #[error("not a P6 portable pixmap: {0}")]
    BadPixmap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (batch samples {samples:?})")]
    NonFiniteLoss {
        loss: f64,
        step: usize,
        samples: Vec<usize>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown training variant {0:?}")]
    UnknownVariant(String),
    #[error("schedule step {step} out of range (total {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from the benchmark harness.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("nothing to measure: output token count is zero")]
    NothingToMeasure,
    #[error(
        "timer resolution insufficient: measured {measured_us} us for {steps} steps; \
         increase steps per measurement above {steps}"
    )]
    TimerResolution { measured_us: u128, steps: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}
