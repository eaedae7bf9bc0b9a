use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes shared by every subcommand.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const COMPUTATION: i32 = 2;
    pub const IO: i32 = 3;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pabee_core::Error),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },

    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training failed for seed {seed}: {source}\n--- configuration ---\n{config}")]
    Training {
        seed: u64,
        config: String,
        #[source]
        source: pabee_core::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn bad_value(key: &str, message: impl Into<String>) -> Self {
        Error::BadValue {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use pabee_core::Error as Core;
        match self {
            Error::Core(Core::Numeric(_) | Core::Divergence { .. } | Core::Search(_))
            | Error::Training { .. } => exit_code::COMPUTATION,
            Error::Io { .. } | Error::Checkpoint { .. } => exit_code::IO,
            _ => exit_code::VALIDATION,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
