use std::path::PathBuf;

use thiserror::Error;

/// Failure modes of the homography fitter. Callers that process whole
/// sequences treat these as recoverable and fall back to identity.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate (collinear) point configuration")]
    Degenerate,
    #[error("inlier fraction {fraction:.3} below minimum {min:.3}")]
    LowInlierFraction { fraction: f64, min: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid manifest: video `{video_id}`: {msg}")]
    Validation { video_id: String, msg: String },
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("homography fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("point at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("non-finite gradient in parameter `{name}` at iteration {iteration}")]
    NonFiniteGradient { name: String, iteration: usize },
    #[error("training diverged at iteration {iteration} (last good checkpoint: {last_good:?})")]
    Diverged {
        iteration: usize,
        last_good: Option<PathBuf>,
    },
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
