//! Shared error type for the whole lab. Variants are grouped roughly by the
//! layer that raises them; messages carry the concrete numbers involved so a
//! failed run can be diagnosed from the message alone.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("degenerate input in {context}: norm {norm} is below 1e-12")]
    DegenerateNorm { context: &'static str, norm: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class {class_id} has no column in the classifier and no synthesized weight")]
    UnresolvableClass { class_id: i64 },

    #[error("no samples available for class {class_id}")]
    EmptyClass { class_id: i64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("feature store: duplicate record for sample `{sample_id}` under version `{version}`")]
    DuplicateRecord { sample_id: String, version: String },

    #[error("feature store: record dim {actual} conflicts with dim {expected} for version `{version}`")]
    InconsistentDim {
        version: String,
        expected: usize,
        actual: usize,
    },

    #[error("feature store: {0}")]
    StoreFormat(String),

    #[error("feature store has no record for sample `{sample_id}` under version `{version}`")]
    MissingRecord { sample_id: String, version: String },

    #[error("gallery: classes {class_ids:?} absent from version `{version}`")]
    MissingClasses { version: String, class_ids: Vec<i64> },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("backfill fraction {0} outside [0, 1]")]
    BadFraction(f64),

    #[error("truncation target dim {target} invalid for embedding dim {dim}")]
    BadTruncation { target: usize, dim: usize },

    #[error("evaluation: {0}")]
    Protocol(String),

    #[error("update gain undefined: new/old metric {new_old} does not exceed old/old metric {old_old}")]
    CriterionUnsatisfied { new_old: f64, old_old: f64 },

    #[error("update gain undefined: paragon metric {paragon} does not exceed old/old metric {old_old}")]
    DegenerateGainDenominator { paragon: f64, old_old: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("class {class_id} has {available} samples, need {needed}")]
    InsufficientSamples {
        class_id: i64,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
