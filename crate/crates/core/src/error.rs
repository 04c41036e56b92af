//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tilt algebra, nuisance fitting, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A density slice is zero at every grid point, so no tilt exists.
    #[error("conditional density is identically zero on the grid")]
    IdenticallyZeroDensity,

    /// A treatment value was queried outside the hull of the support grid.
    #[error("treatment value {0} lies outside the grid hull [{1}, {2}]")]
    OutOfSupportQuery(f64, f64, f64),

    /// Kernel bandwidths must be strictly positive.
    #[error("bandwidth must be positive, got {0}")]
    NonpositiveBandwidth(f64),

    /// A training fold is too small to fit a nuisance model.
    #[error("degenerate fold: {0}")]
    DegenerateFold(String),

    /// Bandwidth selection was called with no candidates.
    #[error("bandwidth candidate set is empty")]
    EmptyCandidateSet,

    /// The exp-transformed regression target would overflow.
    #[error("overflow risk: |delta| * max|A| = {0} exceeds 300")]
    OverflowRisk(f64),

    /// Too few rows for the requested estimation.
    #[error("too few rows: have {have}, need at least {need}")]
    TooFewRows { have: usize, need: usize },

    /// A fold was empty at evaluation time.
    #[error("fold {0} has no validation rows")]
    EmptyFold(usize),

    /// Variance of fewer than two values is undefined.
    #[error("need at least 2 influence values, got {0}")]
    TooFewValues(usize),

    /// Delta grids must be sorted ascending.
    #[error("delta grid is not sorted ascending at position {0}")]
    UnsortedDeltaGrid(usize),

    /// An interior dose-response split produced a half-sample that is too small.
    #[error("half-sample {side} of split at {at} has {have} rows, need at least {need}")]
    EmptyHalfSample {
        side: &'static str,
        at: f64,
        have: usize,
        need: usize,
    },

    /// The dose-response point estimator requires a strictly interior point.
    #[error("target point {0} must lie strictly inside the support ({1}, {2})")]
    InteriorPointRequired(f64, f64, f64),

    /// The requested operation is only defined for positive tilts.
    #[error("delta must be strictly positive, got {0}")]
    PositiveDeltaRequired(f64),

    /// A DGP used with the variance envelopes must declare its bounds.
    #[error("DGP `{0}` does not declare the bound `{1}`")]
    MissingBoundDeclaration(String, &'static str),

    /// A declared column is missing from the input file.
    #[error("column `{0}` not found in input header")]
    MissingColumn(String),

    /// A cell could not be parsed as a number.
    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    /// Every row was rejected during ingestion.
    #[error("no rows remain after filtering missing/non-numeric values")]
    EmptyAfterFiltering,

    /// Grid construction or validation failed.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Non-finite input where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
