use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input samples contain NaN or infinity.
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// No spectral power inside the heart-rate band.
    #[error("no pulse detected in the heart-rate band")]
    NoPulse,

    /// Zero-variance input where a variance is required.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// Shape error while building a computation graph.
    #[error("graph error in `{op}`: {msg}")]
    Graph { op: &'static str, msg: String },

    /// A loss, logit or gradient became NaN/inf.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn graph(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Graph {
            op,
            msg: msg.into(),
        }
    }
}
