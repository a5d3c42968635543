use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DspnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DspnError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("stars out of range at line {line}")]
    StarsOutOfRange { line: usize },

    #[error("unknown polarity {value:?} at line {line}")]
    UnknownPolarity { line: usize, value: String },

    #[error("stars {0} outside [1,5]")]
    InvalidStars(i64),

    #[error("invalid aspect schema: {0}")]
    InvalidSchema(String),

    #[error("no aspect annotations: {0}")]
    NoAnnotations(String),

    #[error("label budget {requested} exceeds the {available} available aspect labels")]
    BudgetTooLarge { requested: usize, available: usize },

    #[error("overlapping word {word:?} in synthetic lexicon")]
    OverlappingLexicon { word: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero row {row} in aspect matrix")]
    ZeroRow { row: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("seed word(s) missing from vocabulary: {}", .0.join(", "))]
    MissingSeeds(Vec<String>),

    #[error("no precomputed embedding for review {0:?}")]
    UnknownReview(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(&'static str),

    #[error("truncated {0}")]
    Truncated(String),

    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),

    #[error("embedding dimension mismatch: file has {file}, expected {expected}")]
    DimensionMismatch { file: usize, expected: usize },

    #[error("negative sampling needs a batch of at least 2 when m > 0 (got {0})")]
    BatchTooSmall(usize),

    #[error("threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),

    #[error("length mismatch: {0} predictions vs {1} gold")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("review {id:?} has no label for label source {source_name}")]
    MissingLabel { id: String, source_name: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{what} fingerprint mismatch: checkpoint {stored}, computed {computed}")]
    FingerprintMismatch {
        what: &'static str,
        stored: String,
        computed: String,
    },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("config error: {0}")]
    Config(String),
}

impl DspnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DspnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DspnError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
