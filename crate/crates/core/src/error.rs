use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("no users survive filtering")]
    EmptyAfterFilter,

    #[error("sequence of user {user} cannot be split: {len} visits at ratio {ratio}")]
    SequenceTooShort { user: String, len: usize, ratio: f64 },

    #[error("{op}: shape mismatch: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("k-means needs k <= n, got k={k}, n={n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("row {row} has zero norm")]
    ZeroVectorRow { row: usize },

    #[error("node {j} is not a neighbor of node {i} under relation {relation}")]
    NotANeighbor { i: usize, j: usize, relation: String },

    #[error("cannot encode an empty sequence")]
    EmptySequence,

    #[error("target index {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("fusion needs at least two views, got {got}")]
    ViewCountTooSmall { got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches the offending path to a file-open failure so command-line
    /// diagnostics name the file instead of just the OS error.
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
