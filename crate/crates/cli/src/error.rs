use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input not found: {0}")]
    MissingInput(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cdds_core::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for missing inputs, 3 for bad configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) => 2,
            CliError::Io(e) if e.kind() == io::ErrorKind::NotFound => 2,
            CliError::Core(cdds_core::Error::Io(e)) if e.kind() == io::ErrorKind::NotFound => 2,
            CliError::Config(_) | CliError::Core(cdds_core::Error::Config(_)) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
