use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {field}: {msg}", path.display())]
    Parse { path: PathBuf, field: &'static str, msg: String },
    #[error(transparent)]
    Core(#[from] modereg_core::Error),
    /// A check the command was asked to enforce did not hold.
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn parse(path: &Path, field: &'static str, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.to_path_buf(), field, msg: msg.into() }
    }

    /// 0 success, 1 usage, 2 data or parse, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Error::Io { .. } | Error::Parse { .. } => 2,
            Error::Core(modereg_core::Error::NonFinite { .. }) => 3,
            Error::Core(_) => 2,
            Error::Failed(_) => 3,
        }
    }
}
