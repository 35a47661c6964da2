use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("gradcheck: non-finite value at coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("gradcheck: test point within {margin:e} of a non-differentiable kink")]
    NearKink { margin: f64 },
    #[error("parse error in {context}: missing or invalid field `{field}`")]
    Parse { context: String, field: String },
    #[error("archive {path}: {msg}")]
    Archive { path: PathBuf, msg: String },
    #[error("non-finite training loss at iteration {iteration}")]
    Diverged { iteration: u64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
