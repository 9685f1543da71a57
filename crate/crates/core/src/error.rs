use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value produced by {layer}")]
    NonFinite { layer: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has {count} sample(s) in the batch; contrastive loss needs at least 2")]
    InsufficientPositives { class: usize, count: usize },
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("class {0} is absent from the labels")]
    MissingClass(usize),
    #[error("cross-subject split impossible: {0}")]
    Split(String),
    #[error("fold {fold}: test subject {subject} appears in training data")]
    SubjectLeakage { fold: usize, subject: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: total loss is not finite")]
    Diverged { epoch: usize, batch: usize },
    #[error("model was exported without projection heads")]
    MissingHeads,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
