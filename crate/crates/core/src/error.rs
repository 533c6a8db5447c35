//! Error type shared across the crate.

/// Failures surfaced by model construction, solving, estimation, and
/// inference. Variants carry enough context to be actionable from a CLI
/// without needing a backtrace.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty design: {0}")]
    EmptyDesign(String),

    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("column '{0}' not found in the data table")]
    MissingColumn(String),

    #[error("column '{column}' must be numeric, found value '{value}'")]
    NonNumeric { column: String, value: String },

    #[error("random factor '{0}' has a single level; its variance is confounded with the residual")]
    SingleLevelFactor(String),

    #[error("variance components must be strictly positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("contrast is not estimable: column {column} of K lies outside the row space of X (relative residual {residual:.3e})")]
    NotEstimable { column: usize, residual: f64 },

    #[error("contrast matrix does not have full column rank (rank {rank} < {q})")]
    ContrastRankDeficient { rank: usize, q: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("inconsistent inverse pair passed to a derivative operator (max |AB - I| = {0:.3e})")]
    InconsistentInverse(f64),

    #[error("internal route disagreement in {context}: max abs diff {diff:.3e} exceeds {tol:.3e}")]
    RouteDisagreement {
        context: &'static str,
        diff: f64,
        tol: f64,
    },

    #[error("Satterthwaite denominator is degenerate (g'Sigma g = {0:.3e}); the variance of the variance estimate is effectively zero")]
    ZeroVarianceOfVariance(f64),

    #[error("degrees of freedom undefined: {0}")]
    DfUndefined(String),

    #[error("adjusted MSE matrix has eigenvalue {0:.3e} below the repair threshold; bias correction is unreliable here")]
    AdjustedMseIndefinite(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
