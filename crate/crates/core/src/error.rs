use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forge pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },

    #[error("unsupported sample rate {0} Hz (supported: 8000, 16000, 48000)")]
    UnsupportedRate(u32),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("empty audio payload in {0}")]
    EmptyPayload(PathBuf),

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed utterance name `{0}`")]
    MalformedName(String),

    #[error("infeasible mixture plan after {planned} of {requested} plans: binding constraint `{constraint}`")]
    Infeasible {
        constraint: String,
        planned: usize,
        requested: usize,
    },

    #[error("retry budget exhausted for capture `{capture}` after {attempts} attempts")]
    RetryExhausted { capture: String, attempts: u32 },

    #[error("speaker {0} owns no time-frequency bins")]
    EmptySpeakerMask(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("zero-energy reference signal")]
    ZeroReference,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<hound::Error> for Error {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(io) => Error::Io(io),
            hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported by reader".into()),
            other => Error::Wav(other.to_string()),
        }
    }
}
