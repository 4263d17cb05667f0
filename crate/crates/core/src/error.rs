use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
///
/// The variants are grouped by who is at fault: `Config` and `Input`/`Validation` are caller
/// errors, `Io` and `Image` are environment errors, and `Tensor` wraps failures from the tensor
/// backend.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}:{line}: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint does not match model configuration:\n{0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at step {step} (last lr {last_lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss {
        step: usize,
        last_lr: f64,
        grad_norm: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint format error: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error was caused by bad caller input rather than the environment.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Validation { .. }
                | Error::UndefinedMetric(_)
                | Error::CheckpointMismatch(_)
                | Error::Json(_)
                | Error::Safetensors(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_bail {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Config(format!($($arg)*)))
    };
}

macro_rules! input_bail {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Input(format!($($arg)*)))
    };
}

pub(crate) use config_bail;
pub(crate) use input_bail;
