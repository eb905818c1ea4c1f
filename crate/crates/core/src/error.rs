use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("IoU is undefined: both boxes have zero area")]
    UndefinedIou,

    #[error("aspect ratio is undefined for a box with zero width or height")]
    DegenerateAspect,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nothing to evaluate: no class has ground truths or detections")]
    EmptyEvaluation,

    #[error("unknown baseline model `{0}`")]
    UnknownBaseline(String),

    #[error("{kind} id {id} referenced by {referrer} does not exist")]
    DanglingId {
        kind: &'static str,
        id: u64,
        referrer: String,
    },

    #[error("{} invalid box(es): {}", .0.len(), .0.join("; "))]
    InvalidBoxes(Vec<String>),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by reading or decoding input, as opposed to
    /// content that decoded fine but violates a contract.
    pub fn is_io_or_parse(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. } | Error::Csv(_))
    }
}
