use thiserror::Error;
use toponav::NavError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("refused: {0}")]
    Contract(String),
}

impl CliError {
    /// Process exit status: 1 usage, 2 I/O, 3 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Contract(_) => 3,
        }
    }
}

impl From<NavError> for CliError {
    fn from(e: NavError) -> Self {
        let msg = e.to_string();
        match e {
            NavError::Config(_) => CliError::Usage(msg),
            NavError::Io(_) | NavError::Load(_) | NavError::Json(_) => CliError::Io(msg),
            NavError::Generation(_)
            | NavError::Sampling(_)
            | NavError::Contract(_)
            | NavError::Index(_)
            | NavError::Num(_) => CliError::Contract(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

pub(crate) fn refuse<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Contract(msg.into()))
}

/// Attaches the path to an I/O failure.
pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
