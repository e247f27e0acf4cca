//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by path construction, the numerics core, data handling,
/// and training.
#[derive(Debug, Error)]
pub enum FameError {
    #[error("degenerate sample: need at least 2 observation points, got {0}")]
    DegenerateSample(usize),

    #[error("observation times must be strictly increasing (violation at index {0})")]
    TimeOrdering(usize),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("quadrature grid is missing path knot {knot} (grids must include every knot)")]
    GridMismatch { knot: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("solver diverged: non-finite state at step {step}")]
    SolverDivergence { step: usize },

    #[error("quadrature error: {0}")]
    Quadrature(String),

    #[error("csv ingestion error at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },

    #[error("cannot split a dataset with fewer than 2 samples")]
    Split,

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("non-finite gradient encountered at parameter '{0}'; training aborted")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}; last finite loss {last_loss}")]
    TrainingDiverged { epoch: usize, last_loss: f64 },

    #[error("unknown case id {0} (expected 1..=8)")]
    UnknownCase(usize),

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FameError>;
