use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-12); cannot normalize")]
    ZeroVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in input")]
    NonFinite,

    #[error("bad magic bytes {0:?}, expected \"ACEF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported feature dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated feature file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("feature file has {0} trailing bytes after the last row")]
    TrailingBytes(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("label file error: {0}")]
    Labels(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("class group {0} has no prompt embeddings")]
    EmptyClassGroup(usize),
    #[error("empty sample stream")]
    EmptyStream,

    #[error("admission threshold is NaN")]
    InvalidThreshold,
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("view batch is empty")]
    EmptyBatch,
    #[error("no visual prototypes present")]
    NoVisualPrototypes,
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("residual cancels prototype of class {0}")]
    DegenerateSum(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
