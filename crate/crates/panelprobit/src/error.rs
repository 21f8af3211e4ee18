use thiserror::Error;

/// Failure modes surfaced by the library.
///
/// `Cholesky` marks genuine numerical failure (a decomposition that stayed
/// non-positive-definite after the jitter retry); everything else is a
/// validation or format problem in the caller's inputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cholesky failed at pivot {pivot}: diagonal value {value:e} after jitter retry")]
    Cholesky { pivot: usize, value: f64 },

    #[error("{0}")]
    Domain(String),

    #[error("data row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Artifact { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(row: usize, msg: impl Into<String>) -> Self {
        Error::Data { row, message: msg.into() }
    }

    /// True for failures of floating-point algebra rather than of input
    /// validation; the CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Cholesky { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
