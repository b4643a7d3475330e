use std::path::PathBuf;

/// Errors raised anywhere in the pruning engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("layer {layer}: shape mismatch: {msg}")]
    ShapeMismatch { layer: usize, msg: String },

    #[error("layer {layer}: convolution followed by ReLU without a batch norm")]
    MissingBatchNorm { layer: usize },

    #[error("layer {layer}: {msg}")]
    InvalidLayer { layer: usize, msg: String },

    #[error("residual link {link}: {msg}")]
    Residual { link: usize, msg: String },

    #[error("unit {unit} has no prunable consumer")]
    NoConsumer { unit: usize },

    #[error("unit {unit}: {msg}")]
    UnsupportedStructure { unit: usize, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f32 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("tensor `{name}` region [{offset}, {end}) overruns blob of {len} bytes")]
    OffsetOverrun {
        name: String,
        offset: usize,
        end: usize,
        len: usize,
    },

    #[error("blob checksum mismatch: manifest {expected:08x}, blob {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unit {unit}: {source}")]
    AtUnit {
        unit: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the index of the unit being processed.
    pub fn at_unit(self, unit: usize) -> Self {
        match self {
            e @ Error::AtUnit { .. } => e,
            e => Error::AtUnit {
                unit,
                source: Box::new(e),
            },
        }
    }
}
