use thiserror::Error;

/// Errors produced anywhere in the adaptation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("export error: {0}")]
    Export(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the caller's configuration rather than by a
    /// failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parameter(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
