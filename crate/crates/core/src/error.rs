use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Shapes or dimensions of runtime inputs do not line up.
    #[error("input error: {0}")]
    Input(String),

    /// Dataset layout or file content problems.
    #[error("data error at {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Binary container (checkpoint, bank) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Pretrained weights were requested but could not be loaded.
    #[error("failed to load pretrained weights from {}: {message}", path.display())]
    WeightLoad { path: PathBuf, message: String },

    /// Two artifacts were produced under different configurations.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1: usage/config, 2: data, 3: numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Mismatch(_) | Error::Input(_) => 1,
            Error::Data { .. }
            | Error::Io { .. }
            | Error::Format(_)
            | Error::WeightLoad { .. }
            | Error::Evaluation(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
