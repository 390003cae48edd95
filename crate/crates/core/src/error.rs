use thiserror::Error;

/// Errors surfaced by the library. Numerical routines report the failing
/// quantity (pivot index, dimension pair) so harness rows can record the
/// failure kind without aborting a run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounds: lo={lo} must be < hi={hi}")]
    InvalidBounds { lo: f64, hi: f64 },

    #[error("invalid parameter {name}: {value} ({requirement})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix not positive definite: pivot {index} = {pivot}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("identifiability violated: {0}")]
    NotIdentified(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("missing standard error on fit result")]
    MissingSe,

    #[error("config error: {0}")]
    Config(String),

    #[error("optimizer did not converge after {evals} evaluations")]
    NoConvergence { evals: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
