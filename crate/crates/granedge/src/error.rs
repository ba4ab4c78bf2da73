use std::path::{Path, PathBuf};

/// Errors of the IO layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] granedge_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    /// Missing or malformed input files.
    #[error("load error: {0}")]
    Load(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

macro_rules! load_err {
    ($($arg:tt)*) => { $crate::error::Error::Load(format!($($arg)*)) };
}
pub(crate) use load_err;
