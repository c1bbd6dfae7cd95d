use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate image: all pixels equal {0}")]
    DegenerateImage(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid dimensions {height}x{width}: {reason}")]
    InvalidDimensions {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("undefined PR-AUC: ground truth has no foreground pixels")]
    UndefinedPrAuc,

    #[error("orphan file without counterpart: {0}")]
    OrphanFile(PathBuf),

    #[error("size mismatch for pair {name}: image {image:?} vs mask {mask:?}")]
    SizeMismatch {
        name: String,
        image: (usize, usize),
        mask: (usize, usize),
    },

    #[error("non-finite value at Euler step {step}")]
    NonFiniteStep { step: usize },

    #[error("non-finite loss (t = {t}, seed = {seed})")]
    NonFiniteLoss { t: f64, seed: u64 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("corrupted checkpoint: {0}")]
    CorruptedCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dataset generation aborted after {} completed files: {source}", completed.len())]
    PartialOutput {
        completed: Vec<PathBuf>,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn with_path(self, what: &str, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn with_path(self, what: &str, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: format!("{what} {}", path.display()),
            source,
        })
    }
}
