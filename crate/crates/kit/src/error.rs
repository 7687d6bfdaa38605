use accent_core::CoreError;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, KitError>;

/// Process exit codes: usage 1, validation and data 2, numerical failure 3.
#[derive(Debug, thiserror::Error)]
pub enum KitError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    /// A numerical check failed: a gradient probe, an oracle comparison, or
    /// a NaN guard.
    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl KitError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> KitError {
        let path = path.into();
        move |source| KitError::Io { path, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            KitError::Usage(_) => 1,
            KitError::Io { .. }
            | KitError::Format(_)
            | KitError::Config(_)
            | KitError::Data(_) => 2,
            KitError::Check(_) => 3,
            KitError::Core(e) => match e {
                CoreError::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}
