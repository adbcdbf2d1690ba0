use std::path::PathBuf;

/// Errors raised anywhere in the engine, generator, and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: every dimension must be at least 1")]
    InvalidShape { shape: Vec<usize> },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("sample {index}: {source}")]
    Sample {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
