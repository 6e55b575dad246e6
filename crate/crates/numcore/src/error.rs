use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate distribution in {op}: row {row} has no unmasked entry")]
    Degenerate { op: &'static str, row: usize },

    #[error("index error in {op}: {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
