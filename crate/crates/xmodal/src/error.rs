use std::path::PathBuf;

/// Errors from file formats, configuration and the pipeline. Each maps to
/// a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum XmodalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("missing prerequisite: stage '{stage}' has not been trained ({path} not found)")]
    MissingDependency { stage: String, path: PathBuf },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("another command holds the lock {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] xmodal_core::Error),
}

pub type Result<T> = std::result::Result<T, XmodalError>;

impl XmodalError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 config, 3 I/O or format, 4 missing
    /// prerequisite, 5 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Format { .. } | Self::Parse { .. } | Self::Locked(_) => 3,
            Self::MissingDependency { .. } => 4,
            Self::Divergence(_) => 5,
            Self::Core(e) => match e {
                xmodal_core::Error::Divergence(_) | xmodal_core::Error::NonFiniteGradient(_) => 5,
                xmodal_core::Error::Config(_) => 2,
                _ => 3,
            },
        }
    }
}
