use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot fit a box to an empty cluster")]
    EmptyCluster,

    #[error("could not place {category} without overlap after {attempts} attempts")]
    PlacementFailure { category: String, attempts: usize },

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("value {value} outside the domain of {op}")]
    Domain { op: &'static str, value: f64 },

    #[error("fusion weights must sum to 1 (got {w_iou} + {w_seeker})")]
    Weight { w_iou: f64, w_seeker: f64 },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("box center ({x:.2}, {y:.2}) lies outside the BEV extent")]
    OutOfExtent { x: f64, y: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Maps a serde_json error to a schema error carrying line/column.
    pub fn from_json(file: impl AsRef<std::path::Path>, err: serde_json::Error) -> Self {
        Error::Schema {
            path: format!(
                "{}:{}:{}",
                file.as_ref().display(),
                err.line(),
                err.column()
            ),
            message: err.to_string(),
        }
    }
}
