use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid stride {0}: must be at least 1")]
    InvalidStride(usize),
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid probability {value} for {what}")]
    InvalidProbability { what: &'static str, value: f64 },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scaling coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("base FLOPS must be positive, got {0}")]
    InvalidBase(f64),
    #[error("no grid point satisfies the constraint tolerance")]
    EmptyResult,
    #[error("invalid resize target {0}")]
    InvalidTarget(usize),
    #[error("invalid scale {0}: must be positive")]
    InvalidScale(f64),
    #[error("invalid piecewise-affine grid {0}: must be at least 2")]
    InvalidGrid(usize),
    #[error("channel std must be positive, got {0}")]
    ZeroStd(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidAugmentConfig(String),
    #[error("{} has no positives or no negatives", column.map_or("score column".to_string(), |c| format!("column {c}")))]
    DegenerateColumn { column: Option<usize> },
    #[error("every label column is degenerate")]
    AllColumnsDegenerate,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unlabeled set is empty")]
    EmptyUnlabeledSet,
    #[error("label column order mismatch")]
    ColumnOrderMismatch,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("ensemble members disagree on class count: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("missing image for id `{0}`")]
    MissingImage(String),
    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedImageFormat(PathBuf),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
