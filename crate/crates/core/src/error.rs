use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: axis {axis} is out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not require grad")]
    RootWithoutGrad,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point is within the pole tolerance of the antipode (alpha = {alpha})")]
    Antipodal { alpha: f64 },

    #[error("point is off the sphere: norm {norm}, radius {radius}")]
    OffSphere { norm: f64, radius: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid spherical configuration: {0}")]
    SphereConfig(String),

    #[error("no valid {kind} window of size {size} after {attempts} attempts")]
    NoValidWindow {
        kind: &'static str,
        size: usize,
        attempts: usize,
    },

    #[error("metric region is empty")]
    EmptyRegion,

    #[error("invalid model dimensions: {0}")]
    ModelDims(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("non-finite loss at step {step} in component `{component}`")]
    NonFiniteLoss { step: usize, component: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
