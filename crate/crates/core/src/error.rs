use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The container or input file is structurally unusable (missing manifest, bad JSON).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// The container parsed but its contents violate an invariant.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("timestep {0} not present in attention stack")]
    MissingTimestep(u32),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("record {0} has no score")]
    ScoreMissing(usize),

    #[error("image codec error on {path}: {msg}")]
    Codec { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        Error::Codec {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
