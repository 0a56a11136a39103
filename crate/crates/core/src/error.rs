use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rank-deficient input: column {0} collapsed during orthogonalization")]
    RankDeficient(usize),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("zero total variance: all snapshots are identical")]
    ZeroVariance,

    #[error("no valid entries under mask")]
    EmptyMask,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("corrupt artifact {}: {reason}", .path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Corrupt { .. } => 4,
            Error::Numerical(_)
            | Error::NonFinite(_)
            | Error::Singular(_)
            | Error::RankDeficient(_)
            | Error::NotSymmetric(_)
            | Error::ZeroVariance => 5,
            Error::Shape(_) | Error::EmptyMask => 2,
            Error::Io(_) => 1,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
