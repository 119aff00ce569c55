use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud contains a non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxel(f64),
    #[error("rotation is not in SO(3): {0}")]
    InvalidRotation(String),
    #[error("invalid octree depth: {0}")]
    InvalidDepth(String),
    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("feature pyramid does not match the cloud: {0}")]
    MismatchedPyramid(String),
    #[error("feature pyramid is empty")]
    EmptyPyramid,
    #[error("feature set is empty")]
    EmptyFeatures,
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("database is empty")]
    EmptyDatabase,
    #[error("no position for {0:?}")]
    PositionMissing(String),
    #[error("sigma_d must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("at least {needed} correspondences required, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("fitness weights do not match scales: {0}")]
    WeightMismatch(String),
    #[error("matrix has a zero row or column")]
    ZeroRowOrColumn,
    #[error("empty patch for coarse octant {0}")]
    EmptyPatch(usize),
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("at least 3 correspondences with positive weight required, got {0}")]
    InsufficientPairs(usize),
    #[error("degenerate correspondence geometry")]
    DegenerateGeometry,
    #[error("no patch has at least 3 fine correspondences")]
    NoValidPatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for everything data related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidVoxel(_)
            | Error::InvalidDepth(_)
            | Error::InvalidSigma(_)
            | Error::WeightMismatch(_) => 2,
            _ => 3,
        }
    }
}
