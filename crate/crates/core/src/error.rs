use std::io;

use thiserror::Error;

/// Everything that can go wrong in the library.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// bad input/file, configuration, and internal invariant violations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("color of point {index} outside [0, 1]")]
    ColorOutOfRange { index: usize },

    #[error("label {label} of point {index} is not below num_classes = {num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("point cloud field lengths disagree: {0}")]
    LengthMismatch(String),

    #[error("index {index} out of range for cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),

    #[error("neighbor index needs at least one point")]
    EmptyIndex,

    #[error("non-finite query point")]
    NonFiniteQuery,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature store: {0}")]
    Store(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,

    #[error("model for scale {0} is frozen")]
    Frozen(usize),

    #[error("model for scale {0} must be frozen before training a later scale")]
    NotFrozen(usize),

    #[error("training data has no labels")]
    MissingLabels,

    #[error("expected {expected} models, got {got}")]
    ModelCountMismatch { expected: usize, got: usize },

    #[error("arrival times: {0}")]
    ArrivalTimes(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated record: expected {expected} points, file ends after {complete}")]
    TruncatedRecord { expected: u64, complete: u64 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("trailing bytes after last record")]
    TrailingBytes,

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error: 2 bad input/file, 3 config, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Invariant(_) | Error::NoForwardRecorded => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
