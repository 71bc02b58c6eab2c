use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("metric error: split `{split}` is empty")]
    EmptySplit { split: String },

    #[error("parse error in {source_name} at line {line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}: batch loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 is reserved for usage errors, which the argument parser reports
    /// before any library code runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
