use thiserror::Error;

pub type Result<T> = std::result::Result<T, NavError>;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("index error: {0}")]
    Index(String),

    #[error(transparent)]
    Num(#[from] numcore::NumError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(NavError::Contract(msg.into()))
}
