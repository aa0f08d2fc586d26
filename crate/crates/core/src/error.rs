use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Each variant maps to a short machine-readable code (see [`Error::code`]) and
/// to one of the CLI exit-code categories (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("truncated or corrupt record in {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("checkpoint tensor `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    /// Short stable identifier used in `error: <code>: <detail>` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::InvalidShape { .. } => "invalid-shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::GradCheck(_) => "gradcheck",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::CheckpointMismatch { .. } => "checkpoint-mismatch",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code: 3 config, 4 io, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch { .. } | Error::InvalidArgument(_) => 3,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 4,
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::NonFinite(_) | Error::GradCheck(_) => 5,
        }
    }
}
