use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape algebra rejected an operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A numeric contract was violated (non-finite value, non-scalar loss, ...).
    #[error("numeric contract violated: {0}")]
    Contract(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file. `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Checkpoint does not match the model the config describes.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Scene generation could not satisfy placement constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training diverged.
    #[error("training aborted at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}
