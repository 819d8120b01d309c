use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Schur stable (spectral radius {0})")]
    Unstable(f64),

    #[error("matrix is rank deficient (smallest singular value {sigma_min:e}, threshold {threshold:e})")]
    RankDeficient { sigma_min: f64, threshold: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode {0} is not controllable")]
    Uncontrollable(usize),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("solution is not optimal ({0})")]
    NotOptimal(String),

    #[error("excitation design reached level {best:e}, below target {target:e}")]
    Excitation { best: f64, target: f64 },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("warm start failed: {0}")]
    WarmStart(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
