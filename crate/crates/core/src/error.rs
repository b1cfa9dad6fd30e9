use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MmqError> = std::result::Result<T, E>;

/// What went wrong while reading or writing one of the binary formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u32),
    CorruptHeader(String),
    TruncatedPayload,
    ChecksumMismatch,
    NonFiniteEntry,
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "corrupt header: bad magic"),
            FormatErrorKind::UnsupportedVersion(v) => {
                write!(f, "corrupt header: unsupported version {v}")
            }
            FormatErrorKind::CorruptHeader(why) => write!(f, "corrupt header: {why}"),
            FormatErrorKind::TruncatedPayload => write!(f, "truncated payload"),
            FormatErrorKind::ChecksumMismatch => write!(f, "checksum mismatch"),
            FormatErrorKind::NonFiniteEntry => write!(f, "non-finite entry"),
        }
    }
}

#[derive(Debug, Error)]
pub enum MmqError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step} ({stage})")]
    Diverged { stage: String, step: usize },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("{kind} ({path})")]
    Format {
        path: PathBuf,
        kind: FormatErrorKind,
    },
    #[error("missing {0}")]
    Missing(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MmqError {
    pub fn dim(
        context: impl Into<String>,
        expected: impl fmt::Display,
        got: impl fmt::Display,
    ) -> Self {
        MmqError::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmqError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatErrorKind) -> Self {
        MmqError::Format {
            path: path.into(),
            kind,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmqError::Config(_)
            | MmqError::UnknownStrategy { .. }
            | MmqError::InvalidArgument(_) => 2,
            MmqError::Dimension { .. }
            | MmqError::NonFinite(_)
            | MmqError::Diverged { .. }
            | MmqError::StaleCache(_) => 3,
            MmqError::Format { .. }
            | MmqError::Missing(_)
            | MmqError::Io { .. }
            | MmqError::Json(_) => 4,
        }
    }
}
