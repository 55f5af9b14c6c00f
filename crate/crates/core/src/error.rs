use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// Grid too small to hold the retained Fourier corners without overlap.
    #[error("edge length {n} is too small for modes {modes:?}: need n >= 2*max(modes) = {required}")]
    GridTooSmall {
        n: usize,
        modes: [usize; 3],
        required: usize,
    },

    #[error("no normalization range registered for edge length {0}")]
    UnknownSize(usize),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("numerical divergence at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
