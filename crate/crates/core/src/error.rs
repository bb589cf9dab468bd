//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A similarity matrix had zero rows or zero columns.
    #[error("similarity matrix is empty")]
    EmptyMatrix,

    /// Rows of a matrix input had differing lengths.
    #[error("row {row} has {got} values, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },

    /// A similarity value was outside [0, 1] by more than the clamp slack.
    #[error("value {value} at flat index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    /// An intra-set matrix was not symmetric, had a non-unit diagonal, or
    /// (for pose-derived inputs) contained values other than 0 and 1.
    #[error("invalid intra-set similarity matrix: {reason}")]
    InvalidIntraSet { reason: String },

    /// Matrix shapes disagree with each other or with the intra-set inputs.
    #[error("size mismatch: {context}")]
    SizeMismatch { context: String },

    /// Two vectors that must have equal lengths did not.
    #[error("length mismatch: {context} ({left} vs {right})")]
    LengthMismatch { context: String, left: usize, right: usize },

    /// A cell index was outside the matrix.
    #[error("cell ({row}, {col}) outside a {rows}x{cols} matrix")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },

    /// Building the graph without patching would exceed the factor cap.
    #[error(
        "graph would hold {factors} factors, above the cap of {cap}; \
         split the problem into patches or raise `factor_cap`"
    )]
    ProblemTooLarge { factors: u64, cap: u64 },

    /// Configuration values violate their documented domain.
    #[error("invalid parameters: {reason}")]
    InvalidParams { reason: String },

    /// The linear solver hit a state that a positive-definite system cannot
    /// produce; this signals a bug, not bad data.
    #[error("numerical failure: {context}")]
    NumericalFailure { context: String },

    /// Score and ground-truth matrices have different shapes.
    #[error("dimension mismatch: scores are {scores_rows}x{scores_cols}, ground truth {gt_rows}x{gt_cols}")]
    DimensionMismatch {
        scores_rows: usize,
        scores_cols: usize,
        gt_rows: usize,
        gt_cols: usize,
    },

    /// Average precision is undefined without at least one positive cell.
    #[error("ground truth contains no positive cells")]
    NoPositives,

    /// A text input could not be parsed.
    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for each error class; the CLI documents
    /// these in its help text.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::EmptyMatrix
            | Error::RaggedRows { .. }
            | Error::ValueOutOfRange { .. }
            | Error::NonFinite { .. }
            | Error::InvalidIntraSet { .. }
            | Error::Parse { .. }
            | Error::Json(_) => 4,
            Error::NoPositives => 5,
            Error::SizeMismatch { .. }
            | Error::LengthMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. } => 6,
            Error::ProblemTooLarge { .. } => 7,
            Error::InvalidParams { .. } => 8,
            Error::NumericalFailure { .. } => 9,
        }
    }
}
