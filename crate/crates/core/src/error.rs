use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PenError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid size {h}x{w}")]
    InvalidSize { h: usize, w: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("image too small for SSIM: {h}x{w} (need at least 11x11)")]
    TooSmall { h: usize, w: usize },
    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),
    #[error("invalid augmentation factor {0}")]
    InvalidFactor(f64),
    #[error("render spec does not fit the background: {0}")]
    GlyphOverflow(String),
    #[error("no text to render")]
    EmptyText,
    #[error("non-finite loss term `{0}`")]
    NonFiniteTerm(String),
    #[error("no text detector was provided")]
    NoDetector,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage {requested} needs a checkpoint from {needed}; got {found}")]
    StageOrder {
        requested: String,
        needed: String,
        found: String,
    },
    #[error("stage 1 needs an initialized stroke module")]
    MissingStrokeInit,
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl PenError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            PenError::FileNotFound(path)
        } else {
            PenError::Io { path, source }
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 checkpoint, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PenError::Config(_) | PenError::InvalidFactor(_) => 2,
            PenError::FileNotFound(_)
            | PenError::Decode { .. }
            | PenError::InvalidImage(_)
            | PenError::InvalidSize { .. }
            | PenError::ShapeMismatch(_)
            | PenError::BadShape(_)
            | PenError::LengthMismatch { .. }
            | PenError::TooSmall { .. }
            | PenError::EmptyDataset(_)
            | PenError::GlyphOverflow(_)
            | PenError::EmptyText => 3,
            PenError::Checkpoint(_) | PenError::StageOrder { .. } | PenError::MissingStrokeInit => {
                4
            }
            _ => 1,
        }
    }
}
