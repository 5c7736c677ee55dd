use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("unsupported {kind} version {found} (this build reads version {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("row count mismatch: {left_name} has {left} rows, {right_name} has {right}")]
    CountMismatch {
        left_name: &'static str,
        left: usize,
        right_name: &'static str,
        right: usize,
    },

    #[error("unknown {kind} class id {id} (vocabulary has {size})")]
    UnknownClass { kind: &'static str, id: u32, size: u32 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing ground truth: {0}")]
    MissingTruth(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::UnknownClass { .. } => "unknown_class",
            Error::Protocol(_) => "protocol",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::MissingTruth(_) => "missing_truth",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
