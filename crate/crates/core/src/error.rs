use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("bitstream format error: {0}")]
    Format(String),

    #[error("range decoder error: {0}")]
    Decode(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad files, wrong flags) rather
    /// than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Tensor(_) | Error::NonFinite(_) | Error::Diverged { .. } | Error::Precondition(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
