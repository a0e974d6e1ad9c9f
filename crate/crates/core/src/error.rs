//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("concat: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("conv2d: kernel dimensions must be odd, got {rows}x{cols}")]
    EvenKernel { rows: usize, cols: usize },

    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("indicator probabilities must lie in [0, 1], observed range [{min}, {max}]")]
    ProbabilityOutOfRange { min: f64, max: f64 },

    #[error("invalid pose: {detail}")]
    InvalidPose { detail: String },

    #[error("degenerate volume bounds: {detail}")]
    DegenerateBounds { detail: String },

    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },

    #[error("invalid phantom spec: {detail}")]
    InvalidPhantom { detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("count mismatch in {path}: {detail}")]
    CountMismatch { path: PathBuf, detail: String },

    #[error("checkpoint: {detail}")]
    Checkpoint { detail: String },

    #[error("operation requires the {expected} variant, checkpoint holds {got}")]
    VariantMismatch { expected: String, got: String },

    #[error("loss became non-finite at iteration {iteration}")]
    NanLoss { iteration: usize },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            detail: detail.into(),
        }
    }
}
