use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the detector, the training loop and the data pipeline.
///
/// `Config` covers everything a caller got wrong before any work started
/// (bad shapes, bad flags, missing inputs); the CLI maps it to exit code 2.
/// The remaining variants are runtime failures and map to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("image error for {path:?}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("i/o error for {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "external video encoder not available: {0}. Set the GLFF_ENCODER environment \
         variable to an ffmpeg-compatible encoder binary or install ffmpeg on PATH"
    )]
    Encoder(String),

    #[error("manifest error at {path:?} line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("detector does not expose input gradients; adversarial perturbation needs a differentiable detector")]
    NotDifferentiable,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Image {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// True when the error is a usage/configuration problem rather than a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
