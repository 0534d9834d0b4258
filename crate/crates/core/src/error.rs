use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mismatched cardinality: {left} points vs {right} points")]
    MismatchedCardinality { left: usize, right: usize },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("near-degenerate spectrum: singular-value gap {gap:e} below threshold {threshold:e}")]
    NearDegenerateSpectrum { gap: f64, threshold: f64 },

    #[error("invalid correspondence set: {0}")]
    InvalidCorrespondences(String),

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("empty cohort")]
    EmptyCohort,

    #[error("mask {index} has no foreground voxels")]
    EmptyMask { index: usize },

    #[error("box center {center:?} lies outside volume dims {dims:?}")]
    CenterOutOfBounds { center: [f64; 3], dims: [usize; 3] },

    #[error("anatomy class {0} appears more than once")]
    DuplicateClass(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad dims {dims:?}: {reason}")]
    BadDims { dims: [usize; 3], reason: String },

    #[error("box for anatomy {anatomy} does not intersect the feature volume")]
    EmptyIntersection { anatomy: usize },

    #[error("anatomy mismatch: expected {expected}, got {got}")]
    AnatomyMismatch { expected: usize, got: usize },

    #[error("non-finite loss component {component} = {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("corrupt file {path}: {reason} (at byte {offset})")]
    CorruptFile {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("thin-plate spline system is singular: {0}")]
    SingularTps(String),

    #[error("mesh has no faces")]
    EmptyMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
