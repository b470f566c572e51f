use std::path::PathBuf;

use thiserror::Error;
use vcnet_autodiff::AutodiffError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown volume format: {0}")]
    UnknownFormat(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("dimensions {0:?} overflow the addressable size")]
    DimensionOverflow(Vec<u64>),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("compressed MetaImage data is not supported")]
    CompressedUnsupported,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("degenerate intensity range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tiling error at voxel {voxel:?}: {reason}")]
    Tiling { voxel: [usize; 3], reason: String },
    #[error("projection window error: {0}")]
    Window(String),
    #[error("tiled layout error: {0}")]
    Layout(String),
    #[error("index map corruption: {0}")]
    Corruption(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vessel placement failed: {0}")]
    Placement(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {seed})")]
    NonFiniteLoss { epoch: usize, batch: usize, seed: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encoding error: {0}")]
    Png(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used as an error prefix by front ends.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Io { .. } => "io",
            CoreError::UnknownFormat(_) => "unknown-format",
            CoreError::Header(_) => "header",
            CoreError::DimensionOverflow(_) => "dimension-overflow",
            CoreError::Truncated { .. } => "truncated",
            CoreError::CompressedUnsupported => "compressed-unsupported",
            CoreError::InvalidVolume(_) => "invalid-volume",
            CoreError::DegenerateRange(_) => "degenerate-range",
            CoreError::DimensionMismatch(_) => "dimension-mismatch",
            CoreError::Tiling { .. } => "tiling",
            CoreError::Window(_) => "window",
            CoreError::Layout(_) => "layout",
            CoreError::Corruption(_) => "corruption",
            CoreError::Config(_) => "config",
            CoreError::Placement(_) => "placement",
            CoreError::NonFiniteLoss { .. } => "non-finite-loss",
            CoreError::Checkpoint(_) => "checkpoint",
            CoreError::Autodiff(_) => "autodiff",
            CoreError::Json(_) => "json",
            CoreError::Png(_) => "png",
        }
    }
}
