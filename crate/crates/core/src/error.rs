use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("position ({u:.3}, {v:.3}) is outside a {width}x{height} map")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config fingerprint mismatch: checkpoint {checkpoint}, config {config}")]
    FingerprintMismatch { checkpoint: String, config: String },

    #[error("feature file error: {0}")]
    FeatureFile(String),

    #[error("sample rejected: {0}")]
    SampleRejected(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
