use thiserror::Error;

/// Errors raised by the numerical laboratory.
///
/// Each variant carries the module that produced it so that the CLI can
/// report module-tagged diagnostics and pick an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("[{module}] domain error: {msg}")]
    Domain { module: &'static str, msg: String },

    #[error("[{module}] numerical failure: {msg}")]
    Numerical { module: &'static str, msg: String },

    #[error("[{module}] incompatible inputs: {msg}")]
    Mismatch { module: &'static str, msg: String },

    #[error("[{module}] parse error: {msg}")]
    Parse { module: &'static str, msg: String },

    #[error("[config] {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { module, msg: msg.into() }
    }

    pub(crate) fn numerical(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerical { module, msg: msg.into() }
    }

    pub(crate) fn mismatch(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Mismatch { module, msg: msg.into() }
    }

    pub(crate) fn parse(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Parse { module, msg: msg.into() }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
