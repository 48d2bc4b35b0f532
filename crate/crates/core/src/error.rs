use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid block or network configuration, including weight mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API precondition that is not about shapes.
    #[error("contract violation: {0}")]
    Contract(String),

    /// File is not in the expected format (wrong magic, unsupported version, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Binary payload ended or was malformed at a byte offset.
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A text annotation line failed validation.
    #[error("{}:{line}: {msg}", path.display())]
    Label { path: PathBuf, line: usize, msg: String },

    /// Dataset layout problems: orphan files, unpaired predictions, unreadable images.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use {config_err, dim_err};
