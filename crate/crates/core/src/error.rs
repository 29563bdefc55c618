use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient support: {got} valid pixels, need at least {need}")]
    InsufficientSupport { got: usize, need: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("missing file for sample {id}: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(PathBuf),

    #[error("training diverged at epoch {epoch} step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::NonFinite(_) => "non_finite",
            Error::Usage(_) => "usage",
            Error::Degenerate(_) => "degenerate",
            Error::Singular(_) => "singular",
            Error::InsufficientSupport { .. } => "insufficient_support",
            Error::Format(_) => "format",
            Error::ArchitectureMismatch(_) => "architecture_mismatch",
            Error::MissingFile { .. } => "missing_file",
            Error::Config { .. } => "config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
