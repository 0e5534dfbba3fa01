//! Error type shared by every fallible operation in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes do not chain or agree.
    #[error("{op}: dimension mismatch, {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    DimensionMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Matrix constructed with a buffer that does not match rows x cols.
    #[error("matrix: data length {len} does not match {rows}x{cols}")]
    BadBuffer {
        rows: usize,
        cols: usize,
        len: usize,
    },

    /// A batch with too few rows for the requested statistic.
    #[error("{op}: batch needs at least {min} rows, got {got}")]
    DegenerateBatch {
        op: &'static str,
        min: usize,
        got: usize,
    },

    /// Class index outside the width of the probability matrix.
    #[error("cross_entropy: label {label} at row {row} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    /// A row that should be a probability distribution but is not.
    #[error("entropy: row {row} is not a probability distribution (sum {sum}, min entry {min})")]
    NotAProbabilityRow { row: usize, sum: f64, min: f64 },

    /// Schedules are defined for epochs starting at 1.
    #[error("{op}: epoch must be >= 1")]
    EpochOutOfRange { op: &'static str },

    /// Labeled-data operation on a dataset without labels.
    #[error("dataset '{name}' has no labels")]
    MissingLabels { name: String },

    #[error("dataset '{name}' is empty")]
    EmptyDataset { name: String },

    /// A cell that failed to parse, with its file coordinates.
    #[error("{path}: line {line}, column {col}: {msg}")]
    CsvCell {
        path: String,
        line: u64,
        col: usize,
        msg: String,
    },

    /// A row whose field count disagrees with the header.
    #[error("{path}: line {line}: expected {expected} fields, found {found}")]
    CsvWidth {
        path: String,
        line: u64,
        expected: usize,
        found: usize,
    },

    /// Structural problems with a CSV file (header, emptiness).
    #[error("{path}: {msg}")]
    CsvFormat { path: String, msg: String },

    /// Invalid configuration or argument combination.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint file that cannot be understood.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
