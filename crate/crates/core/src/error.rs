use thiserror::Error;

/// Errors produced by the preprocessing, sampling, model and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("brain mask is empty")]
    EmptyMask,

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}
