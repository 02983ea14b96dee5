use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient missing for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("duplicate row for sample `{sample}` at time {time}")]
    DuplicateRow { sample: String, time: String },

    #[error("missing value in channel {channel} of sample `{sample}`")]
    MissingValue { sample: String, channel: usize },

    #[error("no default value for channel `{0}` which starts with a gap")]
    MissingDefault(String),

    #[error("category `{value}` not in the order list for `{column}`")]
    UnseenCategory { column: String, value: String },

    #[error("series too short: need {need} steps, got {got}")]
    SeriesTooShort { need: usize, got: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
