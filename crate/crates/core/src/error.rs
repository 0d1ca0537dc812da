use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("detection {index} has an empty foreground set")]
    DegenerateDetection { index: usize },

    #[error("bounding box {bbox:?} has zero area or lies outside the {width}x{height} grid")]
    DegenerateBox {
        bbox: [usize; 4],
        width: usize,
        height: usize,
    },

    #[error("instance too large for exhaustive enumeration: {bits:.1} bits of state (limit 20)")]
    TooLarge { bits: f64 },

    #[error("both masks are empty, IoU is undefined")]
    EmptyMasks,

    #[error("tape does not match: {0}")]
    TapeMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: malformed file at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("{path}: invalid JSON at `{json_path}`: {message}")]
    Json {
        path: String,
        json_path: String,
        message: String,
    },

    #[error("{} missing file(s): {}", .0.len(), .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
