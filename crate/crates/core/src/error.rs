use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("scale must be positive, got {0:?}")]
    NonPositiveScale([f64; 3]),
    #[error("spherical harmonics degree {0} is unsupported (max 3)")]
    UnsupportedShDegree(usize),
    #[error("template has no triangles")]
    EmptyTemplate,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("skeleton parent array contains a cycle at joint {0}")]
    CyclicSkeleton(usize),
    #[error("pruning would remove every gaussian")]
    DegenerateScene,
    #[error("{path}: line {line}: field `{field}`: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown perceptual plugin `{0}`")]
    UnknownPlugin(String),
    #[error("backward pass called without a forward cache")]
    MissingForwardCache,
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("checkpoint version {found} does not match expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
