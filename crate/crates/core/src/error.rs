use thiserror::Error;

pub type Result<T> = std::result::Result<T, RoseError>;

#[derive(Debug, Error)]
pub enum RoseError {
    /// An operation received operands whose shapes it cannot combine.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A checkpoint whose manifest and payload disagree.
    #[error("corrupt checkpoint at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RoseError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RoseError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        RoseError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        RoseError::Data(msg.into())
    }
}
