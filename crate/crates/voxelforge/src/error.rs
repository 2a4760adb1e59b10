use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] voxelforge_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Usage(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::Range(_) => "range",
            Error::Incompatible(_) => "incompatible",
            Error::Usage(_) => "usage",
            Error::Dataset(_) => "dataset",
        }
    }

    /// The display text without its category prefix.
    pub fn message(&self) -> String {
        match self {
            Error::Core(e) => e.message(),
            Error::Io { .. } => self.to_string(),
            Error::Format(m)
            | Error::UnsupportedFormat(m)
            | Error::Range(m)
            | Error::Incompatible(m)
            | Error::Usage(m)
            | Error::Dataset(m) => m.clone(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Attaches a path to `std::io` errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
