use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header field `{field}`: {value}")]
    BadHeader { field: &'static str, value: u64 },
    #[error("file truncated at byte offset {offset} while reading {what}")]
    TruncatedFile { offset: u64, what: &'static str },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { row: usize, id: String },
    #[error("id at row {row} is not valid UTF-8")]
    InvalidId { row: usize },
    #[error("row {row} has L2 norm {norm} but the set is flagged normalized")]
    NormCheckFailed { row: usize, norm: f64 },
    #[error("row {0} is the zero vector")]
    ZeroVectorRow(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} embeddings must be L2-normalized")]
    NotNormalized(&'static str),
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("labels missing on the {0} side")]
    MissingLabels(&'static str),
    #[error("query {0} has no positive in the gallery")]
    QueryWithoutPositive(usize),
    #[error("cycle-consistency selection kept no queries")]
    NoReliableQueries,
    #[error("non-finite loss at query {query}, candidate {candidate}")]
    NonFiniteLoss { query: usize, candidate: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least one true positive and one false positive")]
    DegenerateClasses,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV write failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the optimization itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
