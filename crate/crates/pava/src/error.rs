use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt {kind} file {path}: {reason}")]
    Corrupt {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("unknown activity label `{0}`")]
    UnknownLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("subject-disjoint split infeasible, blocked by subject `{subject}`: {reason}")]
    SplitInfeasible { subject: String, reason: String },

    #[error("clip ids differ between variants: {0:?}")]
    ClipIdMismatch(Vec<String>),

    #[error("class `{0}` has no samples")]
    EmptyClass(String),

    #[error("degenerate frame: mean brightness {0} must lie strictly inside (0, 1)")]
    DegenerateFrame(f64),

    #[error("detector failed on frame {frame}: {reason}")]
    Detector { frame: usize, reason: String },

    #[error("detector backend could not be loaded: {0}")]
    BackendLoad(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("every ensemble member has zero F1 on class `{0}`")]
    ZeroF1Column(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn corrupt(kind: &'static str, path: impl AsRef<Path>, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            kind,
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }
}
