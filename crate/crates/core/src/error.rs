use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("source data is closed; adaptation must not read it")]
    SourceClosed,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing prerequisite {path} (produced by `{produced_by}`)")]
    Dependency { path: PathBuf, produced_by: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures of the binary framing shared by checkpoints and dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("dimension mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Dimension {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    /// Stable machine-readable code, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Contract(_) => "contract",
            Error::TapeConsumed => "tape_consumed",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Config(_) => "config",
            Error::SourceClosed => "source_closed",
            Error::Degenerate(_) => "degenerate",
            Error::Format(FormatError::Crc { .. }) => "crc_mismatch",
            Error::Format(FormatError::Version { .. }) => "version_mismatch",
            Error::Format(FormatError::Truncated(_)) => "truncated",
            Error::Format(FormatError::Dimension { .. }) => "dimension_mismatch",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Dependency { .. } => "dependency",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
