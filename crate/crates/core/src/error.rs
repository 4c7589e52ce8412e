use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error at {path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated input while reading {section}")]
    Truncated { section: String },

    #[error("truncated payload in layer {layer}")]
    TruncatedLayer { layer: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate row {row} in layer {layer} (norm below 1e-12)")]
    DegenerateRow { layer: usize, row: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("similarity between layers {i} and {j}: {source}")]
    LayerPair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("prune plan violation: {0}")]
    PlanViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),
}

/// Coarse failure class used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Training,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) | Error::Path { .. } | Error::MissingArtifacts(_) => ErrorKind::Io,
            Error::Diverged { .. } => ErrorKind::Training,
            Error::LayerPair { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
