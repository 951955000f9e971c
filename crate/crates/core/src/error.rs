use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} is outside the vocabulary (size {size})")]
    InvalidToken { id: u32, size: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("unknown environment kind `{0}`")]
    UnknownEnv(String),

    #[error("cannot step a terminal environment state")]
    TerminalState,

    #[error("task {task_id} does not belong to the {expected} environment")]
    TaskMismatch { task_id: String, expected: String },

    #[error("invalid step: {0}")]
    InvalidStep(String),

    #[error("rollout group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),

    #[error("rollout group mixes task ids `{0}` and `{1}`")]
    MixedGroup(String, String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("placement plan does not cover trajectory {n} step {t}")]
    PlanMismatch { n: usize, t: usize },

    #[error("invalid config value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("{0} is not a normalized distribution")]
    Unnormalized(&'static str),

    #[error("loss is not finite at the evaluated point")]
    NonFiniteLoss,

    #[error("search depth must be positive")]
    InvalidDepth,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed trajectory record: {0}")]
    Record(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
