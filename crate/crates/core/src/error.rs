use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid annotation table: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("voxel grids do not match")]
    GridMismatch,

    #[error("weights must be non-negative and sum to 1 (got sum {0})")]
    Weights(f64),

    #[error("no score for annotator {0:?}")]
    MissingScore(String),

    #[error("image {0:?} is not part of the ground truth")]
    UnknownImage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by reading or decoding input files.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Config(_)
        )
    }
}
