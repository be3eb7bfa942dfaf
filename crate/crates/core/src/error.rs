use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Dimension { op: &'static str, message: String },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Errors from reading or validating grid-series data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed header: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: unsupported format version {version}")]
    Version { line: usize, version: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    RowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: expected {expected} data lines, found {found}")]
    RowCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: negative value {value}")]
    Negative { line: usize, value: f64 },
    #[error("line {line}: invalid value {text:?}")]
    BadValue { line: usize, text: String },
    #[error("line {line}: expected record t={t} a={a}")]
    BadRecord { line: usize, t: usize, a: usize },
    #[error("invalid series: {0}")]
    Invalid(String),
    #[error("series too short: {0}")]
    TooShort(String),
    #[error("attribute index {index} out of range for {count} attributes")]
    AttributeIndex { index: usize, count: usize },
    #[error("values must lie in [0, 1] for training, found {0}")]
    NotNormalized(f64),
}

/// Errors from checkpoint persistence.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("array {name}: {message}")]
    Array { name: String, message: String },
}

/// Errors for configurations that do not fit together.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Model(String),
    #[error("invalid training config: {0}")]
    Train(String),
    #[error("prompt variant does not fit the model: {0}")]
    Prompt(String),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
}

/// Errors raised inside a training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("no gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("parameter {0} has no optimizer state")]
    UntrackedParameter(String),
    #[error("gradient for {name} has {found} values, expected {expected}")]
    GradientShape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no windows")]
    EmptyDataset,
}

/// Top-level error for library entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
