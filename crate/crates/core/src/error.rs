use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// A call sequence that breaks the forward/backward/capture protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },

    #[error("unsupported layer at `{pointer}`: {message}")]
    Unsupported { pointer: String, message: String },

    #[error("inconsistent model shape at `{pointer}`: {message}")]
    ModelShape { pointer: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("mutation not applicable: {0}")]
    Mutation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
