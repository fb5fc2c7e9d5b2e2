use thiserror::Error;

/// Errors produced by environment construction, prediction, estimation and
/// training entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state index {state} out of range for {n_states} states")]
    InvalidState { state: usize, n_states: usize },

    #[error("action index {action} out of range for {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },

    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("similarity weights sum to {sum} (must be positive)")]
    DegenerateSimilarity { sum: f64 },

    #[error("behavior policy has zero probability for action {action} in state {state}")]
    UnsupportedAction { state: usize, action: usize },

    #[error("operation requires a non-empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
