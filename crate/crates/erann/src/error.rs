//! Crate-wide error type and the process exit-code mapping used by the CLI.

/// Everything that can go wrong across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// CLI exit code: 0 success, 1 usage, 2 data error, 3 numeric failure.
    /// Malformed config files count as usage; most other failures are data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
