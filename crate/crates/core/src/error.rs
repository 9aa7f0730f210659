use thiserror::Error;

/// Errors produced anywhere in the maze stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ring {0} has no gate (goal ring)")]
    NoGate(usize),
    #[error("integration produced a non-finite state: {0}")]
    Integration(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("ARX regressor is rank deficient on axis {axis}; autoregressive estimate a = {a}")]
    ArxUnidentifiable { axis: usize, a: f64 },
    #[error("ARX model is not invertible (b = 0)")]
    NotInvertible,
    #[error("optimizer setup failed: {0}")]
    Setup(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
