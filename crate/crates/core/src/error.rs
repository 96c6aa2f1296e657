use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::data::checkpoint::CheckpointError;
use crate::data::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, arity, label layout).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf, log of a non-positive value, or a probability outside its range.
    #[error("numeric fault in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("IDX parse error: {0}")]
    Idx(#[from] IdxError),

    #[error("checkpoint load error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(#[from] ConfigError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
