use std::path::PathBuf;

/// Errors raised across the localization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward has already been run on this tape")]
    BackwardTwice,

    #[error("backward called on a tensor that is not attached to any gradient path")]
    Detached,

    #[error("label {0} is outside {{0, 1}}")]
    Label(f64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode failed: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode failed: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("remote refiner: {0}")]
    Remote(String),
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
