use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("masked softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },

    #[error("index {index} out of range for extent {bound}")]
    Index { index: usize, bound: usize },

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("length plan rejected: {0}")]
    LengthPlan(String),

    #[error("cannot structure an empty document")]
    EmptySample,

    #[error("position {requested} exceeds model capacity {max_position}")]
    Capacity { requested: usize, max_position: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("evaluation corpus holds no complete chunk")]
    EmptyEval,

    #[error("gradient flow property violated: {0}")]
    GradientFlow(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
