use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One violation found while validating a run configuration.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ConfigIssue {
    /// Dotted path of the offending field, e.g. `loss.margin`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("target magnification {requested}x exceeds slide base magnification {base}x")]
    UnsupportedResolution { requested: f64, base: f64 },

    #[error("failed to read slide {slide_id} at ({x}, {y}): {message}")]
    SlideRead {
        slide_id: String,
        x: i64,
        y: i64,
        message: String,
    },

    #[error("candidate pool for {kind} exhausted after {attempts} attempts{progress}")]
    Exhaustion {
        kind: String,
        attempts: usize,
        /// Human-readable progress note, empty when not applicable.
        progress: String,
    },

    #[error("unknown reference: {0}")]
    Lookup(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("class {class} cannot be stratified: {message}")]
    Stratification { class: String, message: String },

    #[error("triplet {index}: {message}")]
    Data { index: usize, message: String },

    #[error("non-finite loss at step {step}{}", diagnostic.as_ref().map(|p| format!(" (diagnostic checkpoint at {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: usize,
        diagnostic: Option<PathBuf>,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("incompatible format in {path}: found version {found}, expected {expected}")]
    Incompatible {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("invalid configuration: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),

    #[error("stage {stage} is missing its upstream artifact: {missing}")]
    Dependency { stage: String, missing: String },

    #[error("stage {stage} artifact {path} changed since it was produced")]
    Stale { stage: String, path: PathBuf },

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Adds the offending path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
