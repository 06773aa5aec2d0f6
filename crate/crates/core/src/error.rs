use std::path::PathBuf;

use crate::tensor::Shape;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed {kind} data at byte {pos}: {msg}")]
    Format {
        kind: &'static str,
        pos: usize,
        msg: String,
    },
    /// A numerical check failed without any value becoming non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("out of memory: need {needed} bytes, budget {budget} bytes")]
    OutOfMemory { needed: u64, budget: u64 },
    #[error("training diverged at epoch {epoch}, step {step}; {}", last_good_note(last_good))]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn last_good_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!("last good checkpoint in {}", p.display()),
        None => "no checkpoint was saved".into(),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }

    pub(crate) fn invalid_shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
