use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cluster must contain at least one device")]
    EmptyCluster,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("numerical blowup while integrating {what}; reduce the step or increase substeps")]
    NumericalBlowup { what: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("experience buffer is empty")]
    EmptyBuffer,

    #[error("non-finite regression target for tuple {index} at iteration {iteration}")]
    NonFiniteTarget { index: usize, iteration: usize },

    #[error("no feasible schedule: {context}")]
    Infeasible { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn infeasible(context: impl Into<String>) -> Self {
        Error::Infeasible {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
