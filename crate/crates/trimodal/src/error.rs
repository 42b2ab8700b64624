//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: failed to load: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },

    #[error("class id {class_id} outside taxonomy of {n_classes} classes")]
    UnknownClass { class_id: usize, n_classes: usize },

    #[error("class {class_id} has only {count} samples; need at least 2 to split")]
    ClassTooSmall { class_id: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("batch size mismatch: {left} vs {right}")]
    BatchSizeMismatch { left: usize, right: usize },

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("{modality} embeddings are not normalized")]
    UnnormalizedInput { modality: &'static str },

    #[error("encoder input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivations { layer: String },

    #[error(
        "non-finite loss in stage {stage}, epoch {epoch}, batch {batch}\
        {}", checkpoint.as_ref().map(|p| format!("; last finite state saved to {}", p.display())).unwrap_or_default()
    )]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        batch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("expected a stage-{expected} encoder set, got stage {got}")]
    StageMismatch { expected: u8, got: u8 },

    #[error("unknown backbone descriptor {name:?}")]
    UnknownDescriptor { name: String },

    #[error("descriptor {name:?} topology mismatch: {detail}")]
    TopologyMismatch { name: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid config:\n{}", problems.join("\n"))]
    ConfigInvalid { problems: Vec<String> },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{n} samples exceed grid capacity {capacity}")]
    GridOverflow { n: usize, capacity: usize },

    #[error("embeddings have zero variance; principal components undefined")]
    ZeroVariance,

    #[error("external projection tool {tool:?} unavailable: {reason}; rerun with method \"pca\"")]
    ExternalTool { tool: String, reason: String },

    #[error("k = {k} too large for {n} samples; use k <= {}", n - 1)]
    KTooLarge { k: usize, n: usize },

    #[error("unknown query id {id:?}")]
    UnknownQuery { id: String },

    #[error("checkpoint taxonomy ({expected}) does not match dataset taxonomy ({got})")]
    TaxonomyMismatch { expected: String, got: String },
}

impl Error {
    /// True for errors caused by bad user input (flags, config, queries),
    /// which the CLI reports with exit code 2 instead of 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::MissingFile { .. }
                | Error::UnknownClass { .. }
                | Error::InvalidArgument(_)
                | Error::UnknownDescriptor { .. }
                | Error::ConfigInvalid { .. }
                | Error::GridOverflow { .. }
                | Error::KTooLarge { .. }
                | Error::UnknownQuery { .. }
                | Error::TaxonomyMismatch { .. }
        )
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
