//! Crate-wide error type.
//!
//! Every fallible operation in the pipeline returns [`RdError`]. Variants are
//! deliberately fine-grained so that batch drivers (the Monte Carlo harness,
//! the CLI) can distinguish problems with the *input* from problems that arise
//! *numerically* while fitting.

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum RdError {
    /// Too few observations for the requested operation.
    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// The running variable does not carry enough distinct values.
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    /// A spline basis was requested with an unusable knot configuration.
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    /// One side of the cutoff is too thin to fit the first stage.
    #[error("segment too small: {count} observations {side} the cutoff, need at least {needed}")]
    SegmentTooSmall {
        side: &'static str,
        count: usize,
        needed: usize,
    },

    /// A design matrix lost full column rank.
    #[error("rank-deficient design matrix")]
    RankDeficientDesign,

    /// The logistic first stage ran into (quasi-)complete separation:
    /// treatment looks deterministic in the running variable. Usually a sign
    /// that the data are really a sharp design.
    #[error(
        "separation detected in the propensity fit; treatment appears deterministic \
         in the running variable (consider estimating a sharp design)"
    )]
    SeparationDetected,

    /// The binary outcome of the first stage has no variation.
    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),

    /// A computation returned a non-finite or otherwise unusable result.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A linear system's condition number exceeded the 1e12 guard.
    #[error("ill-conditioned system: condition number {cond:.3e} exceeds 1e12")]
    IllConditioned { cond: f64 },

    /// A marginal leverage reached 1, so the leverage-corrected residual blows up.
    #[error("leverage overflow: observation {index} has leverage {value:.12} (too close to 1)")]
    LeverageOverflow { index: usize, value: f64 },

    /// The quadratic form g'S g vanished, so the variance ratio is undefined.
    #[error("degenerate g transform: g'Sg is numerically zero")]
    DegenerateG,

    /// Confidence level outside (0, 1).
    #[error("invalid confidence level: alpha must lie strictly in (0, 1), got {alpha}")]
    InvalidLevel { alpha: f64 },

    /// A trace-normalised quadratic-form matrix was unusable.
    #[error("degenerate quadratic form: {0}")]
    DegenerateQuadraticForm(String),

    /// A kernel window captured fewer than three usable observations on a side.
    #[error("bandwidth too small: only {count} positive-weight observations {side} the cutoff")]
    BandwidthTooSmall { side: &'static str, count: usize },

    /// The first-stage jump at the cutoff is too small for a fuzzy ratio estimate.
    #[error(
        "weak discontinuity: treatment-probability jump {jump:.4} at the cutoff \
         is too small (need |jump| > 0.05)"
    )]
    WeakDiscontinuity { jump: f64 },

    /// Treatment does not equal the cutoff indicator everywhere.
    #[error("not a sharp design: treatment disagrees with the cutoff rule at row {index}")]
    NotSharpDesign { index: usize },

    /// More than 5% of Monte Carlo replications failed for one method.
    #[error("excessive failures: {failed} of {reps} replications failed for method '{method}'")]
    ExcessiveFailures {
        method: String,
        failed: usize,
        reps: usize,
    },

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A CSV record could not be parsed; `line` is 1-based (header is line 1).
    #[error("csv error at line {line}: {msg}")]
    CsvData { line: u64, msg: String },

    /// The CSV header lacks a required column.
    #[error("missing required column '{0}' in csv header")]
    MissingColumn(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RdError>;

impl RdError {
    /// Process exit code the CLI maps this error to: 2 for input/validation
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RdError::InsufficientData { .. }
            | RdError::DegenerateSupport(_)
            | RdError::InvalidBasis(_)
            | RdError::SegmentTooSmall { .. }
            | RdError::SeparationDetected
            | RdError::DegenerateOutcome(_)
            | RdError::InvalidLevel { .. }
            | RdError::NotSharpDesign { .. }
            | RdError::InvalidConfig(_)
            | RdError::CsvData { .. }
            | RdError::MissingColumn(_)
            | RdError::Io(_) => 2,
            RdError::RankDeficientDesign
            | RdError::NumericalFailure(_)
            | RdError::IllConditioned { .. }
            | RdError::LeverageOverflow { .. }
            | RdError::DegenerateG
            | RdError::DegenerateQuadraticForm(_)
            | RdError::BandwidthTooSmall { .. }
            | RdError::WeakDiscontinuity { .. }
            | RdError::ExcessiveFailures { .. } => 3,
        }
    }

    /// Whether the optimal-g refinement may swallow this error and fall back
    /// to the identity transform. Data-validation errors must propagate;
    /// purely numerical degeneracies inside the refinement must not kill a
    /// batch run.
    pub(crate) fn recoverable_in_gopt(&self) -> bool {
        matches!(
            self,
            RdError::RankDeficientDesign
                | RdError::NumericalFailure(_)
                | RdError::IllConditioned { .. }
                | RdError::LeverageOverflow { .. }
                | RdError::DegenerateG
                | RdError::DegenerateQuadraticForm(_)
        )
    }
}
