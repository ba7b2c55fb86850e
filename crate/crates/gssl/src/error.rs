use std::path::{Path, PathBuf};

pub type Result<T, E = IoError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{}: malformed tensor at byte {offset}: {reason}", path.display())]
    FileFormat {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] gssl_core::Error),
}

impl IoError {
    pub fn path(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            Self::Format { offset, reason } => Self::FileFormat {
                path: path.to_path_buf(),
                offset,
                reason,
            },
            other => other,
        }
    }

    /// True for errors caused by the user's input rather than the run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}
