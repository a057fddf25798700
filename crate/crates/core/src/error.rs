use thiserror::Error;

/// Which part of the self-normalised objective went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveTerm {
    Data,
    Normalizer,
}

impl std::fmt::Display for ObjectiveTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObjectiveTerm::Data => write!(f, "data"),
            ObjectiveTerm::Normalizer => write!(f, "normalizer"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SnlError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite energy {value} at sample {index}")]
    NonFiniteEnergy { index: usize, value: f64 },

    #[error("non-finite {term} term in objective ({value})")]
    NonFiniteObjective { term: ObjectiveTerm, value: f64 },

    #[error("degenerate proposal: all importance weights underflow to zero")]
    DegenerateProposal,

    #[error("non-finite gradient entry {value} at coordinate {index}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} '{name}'")]
    UnknownName { kind: &'static str, name: String },

    #[error(
        "training diverged at step {step}: objective non-finite for {consecutive} consecutive steps \
         (max energy {max_energy}, min log-weight {min_log_weight})"
    )]
    Diverged {
        step: usize,
        consecutive: usize,
        max_energy: f64,
        min_log_weight: f64,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SnlError>;
