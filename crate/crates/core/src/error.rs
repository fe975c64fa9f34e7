use std::path::PathBuf;

/// Errors produced anywhere in the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("k exceeds feature dimension (k = {k}, dim = {dim})")]
    KExceedsDim { k: usize, dim: usize },

    #[error("k must be at least 1")]
    ZeroK,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero vector")]
    ZeroVector,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no supervised pixels")]
    NoSupervisedPixels,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("model is not trained")]
    Untrained,

    #[error("training set needs at least 2 classes, found {0}")]
    DegenerateTrainset(usize),

    #[error("labeled split missing class {0}")]
    LabeledSplitMissingClass(usize),

    #[error("could not place shape after {0} attempts")]
    Placement(usize),

    #[error("unknown ablation axis '{0}' (valid axes: k, alpha, bbox_conf, bank_capacity, similarity)")]
    UnknownAxis(String),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
