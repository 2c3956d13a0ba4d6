use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("layer index {layer} out of range for a graph with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error(
        "CAM requires a model whose head is global-average-pool followed by a single dense layer"
    )]
    CamRequiresGap,

    #[error("unknown model architecture `{0}`")]
    UnknownModel(String),

    #[error("unknown saliency method `{0}`")]
    UnknownMethod(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("seed mismatch: manifest was generated with seed {manifest}, requested {requested}")]
    SeedMismatch { manifest: u64, requested: u64 },

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("cannot access {}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
