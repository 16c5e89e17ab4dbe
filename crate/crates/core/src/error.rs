use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),

    #[error("trajectory truncated at step {step}: separation {separation:.4} below guard {guard}")]
    TrajectoryTruncated {
        step: usize,
        separation: f64,
        guard: f64,
    },

    #[error("invalid dataset split: {0}")]
    InvalidSplit(String),

    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence {
        epoch: usize,
        loss: f64,
        last_good: Box<crate::worldmodel::ModelParams>,
    },

    #[error("unknown block {name} (available: {})", available.join(", "))]
    UnknownBlock { name: String, available: Vec<String> },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("time step {step} has {count} samples; at least 2 are required")]
    UnderdeterminedStep { step: usize, count: usize },

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("unbound variable {0}")]
    UnboundVariable(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank deficient: {0}")]
    Rank(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
