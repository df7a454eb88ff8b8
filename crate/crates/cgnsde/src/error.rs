//! Error type shared by every module of the crate.

use thiserror::Error;

/// Unified error enum for numerical, modeling, and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix expected to be symmetric positive-definite failed its
    /// Cholesky factorization even after one jitter repair.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    /// Fewer samples than the estimator requires.
    #[error("insufficient samples: got {got}, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },

    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Benchmark name not recognized.
    #[error("unknown benchmark: {0}")]
    UnknownBenchmark(String),

    /// A state entry left the plausible simulation envelope (|x| > 1e8) or
    /// became non-finite.
    #[error("numerical blowup at step {step}")]
    NumericalBlowup { step: usize },

    /// A series is too short for the requested operation.
    #[error("series too short: length {len}, need at least {need}")]
    TooShort { len: usize, need: usize },

    /// The filter covariance could not be repaired back to positive
    /// definiteness.
    #[error("filter covariance collapsed at step {step}")]
    CovarianceCollapse { step: usize },

    /// A candidate term references a state index outside the trajectory.
    #[error("state index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    /// The candidate library produced an irreparably singular covariance
    /// (for example two proportional columns).
    #[error("degenerate candidate library (row {row}, column {col})")]
    DegenerateLibrary { row: usize, col: usize },

    /// Least-squares design matrix is rank deficient.
    #[error("rank-deficient regression design ({terms} terms, {samples} samples)")]
    RankDeficient { terms: usize, samples: usize },

    /// Two aligned series have different lengths.
    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// A gradient entry is NaN or infinite.
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    /// The recorded tape exceeded its configured size cap.
    #[error("tape overflow: {nodes} nodes exceeds cap {cap}")]
    TapeOverflow { nodes: usize, cap: usize },

    /// Ensemble spread fell below machine resolution.
    #[error("ensemble collapsed at step {step}")]
    EnsembleCollapse { step: usize },

    /// A histogram was requested over a constant series.
    #[error("degenerate range: min == max == {0}")]
    DegenerateRange(f64),

    /// A file failed to parse.
    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A configuration or serialized model violates an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A serialized artifact has an unsupported schema version.
    #[error("schema version mismatch: found {found}, supported {supported}")]
    SchemaVersionMismatch { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
