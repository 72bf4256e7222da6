use std::path::PathBuf;

use crate::config::ConfigError;
use crate::dataset::DatasetError;
use crate::ensemble::EnsembleError;
use crate::head::HeadError;
use crate::image::ImageError;
use crate::metrics::MetricsError;
use crate::predictions::PredictionError;
use crate::preprocess::PreprocessError;
use crate::tta::TtaError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error; every module error converts into it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tta(#[from] TtaError),
    #[error(transparent)]
    Predictions(#[from] PredictionError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure came from the filesystem rather than from the
    /// content of the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image(e) => e.is_io(),
            Error::Head(HeadError::Io(_)) => true,
            Error::Dataset(DatasetError::Csv(e)) | Error::Predictions(PredictionError::Csv(e)) => {
                e.is_io_error()
            }
            _ => false,
        }
    }
}

/// Attach a path to I/O results.
pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
