use std::path::PathBuf;

use thiserror::Error;

use crate::transfer::TransferResult;

pub type Result<T, E = CamsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CamsError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("cannot decode image {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid kernel size {0}: must be odd and >= 1")]
    InvalidKernel(usize),

    #[error("invalid sigma {0}: must be > 0")]
    InvalidSigma(f64),

    #[error("invalid size {height}x{width}: dimensions must be >= 1")]
    InvalidSize { height: usize, width: usize },

    #[error("invalid palette request: {0}")]
    InvalidPalette(String),

    #[error("palette error: {0}")]
    Palette(String),

    #[error("weights mismatch: {0}")]
    WeightsMismatch(String),

    #[error("input {height}x{width} is smaller than the backbone minimum {min}x{min}")]
    TooSmallInput { height: usize, width: usize, min: usize },

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("empty feature map")]
    EmptyFeature,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("layer set mismatch: {0}")]
    LayerSetMismatch(String),

    #[error("gram key set mismatch: {0}")]
    KeySetMismatch(String),

    #[error("loss became non-finite{}", .iter.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFiniteLoss {
        iter: Option<usize>,
        /// State of the run at the last iteration with a finite loss.
        last_finite: Option<Box<TransferResult>>,
    },

    #[error("invalid association: {0}")]
    InvalidAssociation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cancelled")]
    Cancelled,

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
