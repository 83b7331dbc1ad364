use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward called on {0} before forward")]
    NoForwardCache(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: String },

    #[error(
        "config hash mismatch for {}: artifact has {found}, current config is {expected} (use --force to override)",
        path.display()
    )]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigHashMismatch { .. } | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
