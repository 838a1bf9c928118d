use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    Size { expected: u64, actual: u64 },

    #[error("unknown band `{name}`; available: {available:?}")]
    Lookup { name: String, available: Vec<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("model is incompatible with input; missing features: {missing:?}")]
    Compatibility { missing: Vec<String> },

    #[error("crown {id} has no valid pixels and cannot be classified")]
    Unclassifiable { id: u32 },

    #[error("unknown label `{0}`")]
    Label(String),

    #[error("could not place crown {placed_so_far} after {attempts} attempts; reduce crown counts or spacing")]
    Capacity { placed_so_far: usize, attempts: usize },

    #[error("missing output for tile window at ({x}, {y})")]
    Completeness { x: usize, y: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed on {input}: {source}")]
    Stage {
        stage: &'static str,
        input: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { field: field.into(), message: message.into() }
    }

    /// Wraps an error with the pipeline stage and input it came from.
    pub fn in_stage(self, stage: &'static str, input: impl Into<String>) -> Self {
        Error::Stage { stage, input: input.into(), source: Box::new(self) }
    }

    /// Process exit status for this error: 2 configuration, 3 data/format, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Size { .. }
            | Error::Lookup { .. }
            | Error::Shape(_)
            | Error::Bounds(_)
            | Error::Domain(_)
            | Error::DegenerateData(_)
            | Error::Divergence { .. }
            | Error::Compatibility { .. }
            | Error::Unclassifiable { .. }
            | Error::Label(_)
            | Error::Capacity { .. } => 3,
            Error::Completeness { .. } => 4,
        }
    }
}
