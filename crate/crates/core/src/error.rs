use thiserror::Error;

/// Errors raised by the sketches, pipelines and stream formats.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A fixed-point accumulator would leave the 64-bit range.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Every level of a sketch failed, so no estimate can be formed.
    #[error("estimation unavailable: every sketch level failed")]
    EstimationUnavailable,

    /// A binary stream or blob is malformed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A multi-pass pipeline failed inside a named stage.
    #[error("pipeline error in {stage}: {msg}")]
    Pipeline { stage: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
