use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("class has no support samples")]
    EmptySupport,

    #[error("degrees of freedom must be positive, got {0}")]
    NonPositiveDof(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} already present in model")]
    DuplicateClass(u32),

    #[error("model mode {found} cannot serve a {expected} prediction")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dataset has {available} classes, episode needs {required}")]
    InsufficientClasses { available: usize, required: usize },

    #[error("class {class} has {available} samples, episode needs {required}")]
    InsufficientSamplesPerClass {
        class: u32,
        available: usize,
        required: usize,
    },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes {0:?}, expected \"MQDF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated file: expected {expected} bytes, found {found} (payload ends at offset {found})")]
    TruncatedFile { expected: u64, found: u64 },

    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("non-finite feature value at row {row}")]
    NonFiniteFeature { row: u64 },

    #[error("malformed checkpoint, line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
