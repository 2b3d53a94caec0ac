use thiserror::Error;

/// Errors raised by the compression engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer} has no {missing} tokens; cross-modal attention is undefined")]
    DegenerateModality { layer: usize, missing: &'static str },

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Failures when loading a trace file.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unsupported trace version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("trace truncated: {0}")]
    Truncated(String),

    #[error("trace shape inconsistent: {0}")]
    ShapeInconsistent(String),

    #[error("trace not parseable: {0}")]
    Malformed(String),
}

impl Error {
    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) => 3,
            Error::Contract(_) | Error::DegenerateModality { .. } => 4,
            Error::Trace(_) => 5,
            Error::Io(_) | Error::Csv(_) => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
