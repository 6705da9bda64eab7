use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {what} (expected {expected}, got {got})")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: usize, reason: String },

    #[error("empty {0}")]
    EmptyData(&'static str),

    #[error("non-finite value during {0}")]
    NonFinite(&'static str),

    #[error("sparsity {0} outside [0, 1)")]
    InvalidSparsity(f64),

    #[error("mask violates sparsity budget: {active} active modules, budget {budget}")]
    BudgetViolated { active: usize, budget: usize },

    #[error("layer {layer} has {modules} modules, enumeration limit is {limit}")]
    LayerTooLarge {
        layer: usize,
        modules: usize,
        limit: usize,
    },

    #[error("duplicate or already-removed sample id {0}")]
    DuplicateId(usize),

    #[error("unknown sample id {0}")]
    UnknownId(usize),

    #[error("retain set too small for removal ({0} samples left)")]
    RetainExhausted(usize),

    #[error("relearn set overlaps the forget set (sample id {0})")]
    RelearnOverlap(usize),

    #[error("invalid hyperparameter: {0}")]
    InvalidHParam(String),

    #[error("split hygiene violated: {0}")]
    SplitHygiene(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn in_phase(self, phase: &'static str) -> Error {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
