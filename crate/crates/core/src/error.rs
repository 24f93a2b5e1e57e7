use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Distinct failure modes of point-cloud text formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MalformedHeader,
    CountMismatch,
    NonNumeric,
    UnsupportedFormat,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("{path}:{line}: {kind:?}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        kind: ParseErrorKind,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("overlap search failed after {steps} steps: target {target:.3}, best {best:.3}")]
    OverlapSearch { steps: usize, target: f64, best: f64 },

    #[error("non-finite loss on pair seed {seed} (epoch {epoch})")]
    NanLoss { seed: u64, epoch: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NanGradient { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by bad numerics rather than bad data or usage.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Degenerate(_)
                | Error::NanLoss { .. }
                | Error::NanGradient { .. }
        )
    }
}
