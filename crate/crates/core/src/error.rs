use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants fall into four families that the command-line front end
/// maps onto distinct exit codes: usage/configuration, data, numerical
/// and I/O.
#[derive(Debug, Error)]
pub enum DhnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error at row {row}, column '{column}': {message}")]
    DataAt {
        row: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("model load error: {0}")]
    Load(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DhnError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DhnError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors that signal the optimisation has left the
    /// numerically valid region.
    pub fn is_numerical(&self) -> bool {
        matches!(self, DhnError::Numerical(_) | DhnError::Divergence(_))
    }
}

pub type Result<T> = std::result::Result<T, DhnError>;
