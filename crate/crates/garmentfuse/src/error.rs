use std::path::PathBuf;

use garmentfuse_core::Error as CoreError;

use crate::ppm::PpmError;

/// Process exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Process exit status for non-finite losses, gradients or predictions.
pub const EXIT_NUMERIC: i32 = 3;
/// Process exit status for everything else.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Ppm {
        path: PathBuf,
        #[source]
        source: PpmError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                CoreError::NonFinite { .. } | CoreError::NonFiniteGradient(_) | CoreError::NonFiniteLoss { .. } => {
                    EXIT_NUMERIC
                }
                CoreError::Invalid(_)
                | CoreError::UnknownCategory(_)
                | CoreError::DuplicateCategory(_)
                | CoreError::TooManyGarments { .. }
                | CoreError::Geometry { .. }
                | CoreError::MissingLayer(_)
                | CoreError::FusionModeMismatch { .. }
                | CoreError::Architecture(_)
                | CoreError::StageMismatch { .. }
                | CoreError::EmptyBatch
                | CoreError::Groups { .. }
                | CoreError::Pairing(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            },
            CliError::Io { .. } | CliError::Ppm { .. } | CliError::Json { .. } => EXIT_FAILURE,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
