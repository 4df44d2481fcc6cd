use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain of an operation (band too wide, empty ensemble, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input records that violate a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was invoked in the wrong order.
    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
