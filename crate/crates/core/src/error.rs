use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthonormality residual {residual:.3e})")]
    NotARotation { residual: f64 },

    #[error("sequence too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("sequence too short after augmentation: {got} frames (minimum {needed})")]
    TooShortAfterAugment { needed: usize, got: usize },

    #[error("bad volume dimensions {dims:?}: every axis must be at least {min}")]
    BadDims { dims: [usize; 3], min: usize },

    #[error("bad trajectory spec: {0}")]
    BadSpec(String),

    #[error("frame {frame} leaves the phantom volume")]
    OutOfVolume { frame: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid scan: {}", .0.join("; "))]
    InvalidScan(Vec<String>),

    #[error("backward called without a matching forward pass")]
    StateMismatch,

    #[error("scan has no ground truth")]
    NoGroundTruth,

    #[error("loss diverged at step {step}")]
    Divergence { step: usize },

    #[error("trajectory length mismatch: estimate has {est} poses, reference has {reference}")]
    LengthMismatch { est: usize, reference: usize },

    #[error("reference trajectory length {length:.3e} mm is degenerate")]
    DegenerateLength { length: f64 },

    #[error("trajectory is empty")]
    EmptyTrajectory,

    #[error("{0}")]
    Unsupported(String),

    #[error("format version mismatch in {path}: file has version {found}, this build reads version {expected}")]
    FormatVersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
