use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyPointCloud,
    #[error("invalid voxel size")]
    InvalidVoxelSize,
    #[error("degenerate view direction")]
    DegenerateViewDirection,
    #[error("degenerate rotation")]
    DegenerateRotation,
    #[error("singular covariance")]
    SingularCovariance,
    #[error("invalid point cloud: {0}")]
    InvalidPointCloud(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownConfigKey { key: String, valid: String },
    #[error("invalid value for config key `{key}`: {message}")]
    InvalidConfigValue { key: String, message: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        last_good: Box<Checkpoint>,
    },
    #[error("index {index} out of range; valid range is 0 to {} inclusive", .len.saturating_sub(1))]
    IndexOutOfRange { index: usize, len: usize },
    #[error("scene has no held-out views")]
    NoTestViews,
    #[error("scene has no training views")]
    NoTrainViews,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
