use thiserror::Error;

/// Error taxonomy shared across the crate. The short prefixes ("shape",
/// "domain", ...) are part of the CLI contract and show up in exit-code
/// mapping, so keep them stable.
#[derive(Debug, Error)]
pub enum CvdError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("data: {0}")]
    Data(String),
    #[error("format: {msg} (byte offset {offset})")]
    Format { offset: u64, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, CvdError>;

impl CvdError {
    /// Process exit code for the CLI: 1 usage/config, 2 io/format, 3 diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            CvdError::Io(_) | CvdError::Format { .. } => 2,
            CvdError::Diverged(_) => 3,
            _ => 1,
        }
    }
}
