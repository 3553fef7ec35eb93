use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] emofuse_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A file exists but does not hold what its manifest or name promises.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    /// A check or experiment ran to completion and did not pass.
    #[error("{0}")]
    Failed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 1 for anything the caller can fix by changing
    /// inputs or flags, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use emofuse_core::Error as C;
        match self {
            Error::Usage(_) | Error::Format { .. } => 1,
            Error::Core(C::Config(_) | C::Argument(_) | C::Shape { .. } | C::Index { .. } | C::Domain { .. }) => 1,
            Error::Core(C::NonFinite(_) | C::RankDeficient { .. }) => 2,
            Error::Io { .. } | Error::Failed(_) => 2,
        }
    }
}
