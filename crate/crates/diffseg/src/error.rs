use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] diffseg_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("missing file {}", .0.display())]
    Missing(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// Process exit status: 1 validation, 2 I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(diffseg_core::Error::Numeric(_)) => 3,
            Error::Core(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Missing(_) => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Core(diffseg_core::Error::Numeric("nan".into())).exit_code(), 3);
        assert_eq!(Error::Core(diffseg_core::Error::InvalidArgument("x".into())).exit_code(), 1);
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Missing(PathBuf::from("a")).exit_code(), 2);
        assert_eq!(Error::format(Path::new("a"), "bad").exit_code(), 2);
        let e = Error::io(Path::new("dir/file"), std::io::Error::other("boom"));
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.to_string(), "dir/file: boom");
    }
}
