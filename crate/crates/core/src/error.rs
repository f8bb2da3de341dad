use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read NIfTI file {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("example `{id}` is missing its {modality} file")]
    MissingModality { id: String, modality: String },

    #[error("segmentation files present for some examples but not for `{id}`")]
    MixedSegmentation { id: String },

    #[error("unknown example id `{0}`")]
    UnknownExample(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label value {value} in {context} (expected one of 0, 1, 2, 4)")]
    InvalidLabel { value: u8, context: String },

    #[error("volume `{0}` has no nonzero voxels")]
    EmptyVolume(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, batch {batch_ids:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("malformed {kind} file {path}: {message}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            message: message.to_string(),
        }
    }
}
