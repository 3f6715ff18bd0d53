use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, scene geometry or config file.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operands that do not agree (grid or wavelength mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data: IDX files, raw records, manifests, CSVs.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("numerical abort at realization {realization}: {message}")]
    Numerical { realization: usize, message: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Numerical { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
