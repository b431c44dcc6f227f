use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape: {0}")]
    InputShape(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("numerical failure in {stage}: {msg}")]
    Numerical { stage: &'static str, msg: String },

    #[error("rank-deficient pilot matrix at subcarrier {subcarrier}")]
    RankDeficient { subcarrier: usize },

    #[error("search space of {size} candidates exceeds the guard of {guard}")]
    SearchSpace { size: u128, guard: u128 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numerical(stage: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerical {
            stage,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InputShape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
