//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {reason}")]
    InvalidShape { reason: String },

    #[error("tensor construction: shape {shape} expects {expected} values, got {actual}")]
    LengthMismatch {
        shape: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate batch: batchnorm train mode needs at least 2 elements per channel, got {elements}")]
    DegenerateBatch { elements: usize },

    #[error("model construction: {reason}")]
    Construction { reason: String },

    #[error("state error: {reason}")]
    State { reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("label csv is missing required column {column:?}")]
    CsvSchema { column: String },

    #[error("label csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("corpus error: {reason}")]
    Corpus { reason: String },

    #[error("split error: {reason}")]
    Split { reason: String },

    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },

    #[error("manifest checksum mismatch: header says {expected:08x}, content hashes to {actual:08x}")]
    ManifestIntegrity { expected: u32, actual: u32 },

    #[error("checkpoint format: {reason}")]
    CheckpointFormat { reason: String },

    #[error("checkpoint version {found} not supported (this build reads up to version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint checksum mismatch: file is corrupt or truncated")]
    CheckpointIntegrity,

    #[error("non-finite gradient in parameter {param}; training aborted")]
    NanGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}; training aborted")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("roc undefined: {reason}")]
    RocUndefined { reason: String },

    #[error("config key {key:?}: {reason}")]
    Config { key: String, reason: String },
}

impl Error {
    pub fn shape_mismatch(
        context: &str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
