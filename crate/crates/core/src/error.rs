use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({x}, {y}) lies outside the {width}x{height} image")]
    PixelOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic in checkpoint header")]
    BadMagic,

    #[error("truncated checkpoint: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("grid dimensions {nx}x{ny}x{nz} overflow the addressable voxel count")]
    DimensionOverflow { nx: u32, ny: u32, nz: u32 },

    #[error("image is {found_width}x{found_height}, expected {width}x{height}")]
    DimensionMismatch {
        width: u32,
        height: u32,
        found_width: u32,
        found_height: u32,
    },

    #[error("search diverged: every hypothesis produced a non-finite loss")]
    SearchDiverged,

    #[error("non-finite training loss at iteration {iteration}")]
    TrainingDiverged { iteration: u64 },

    #[error("dataset not found at {0}")]
    DatasetNotFound(PathBuf),

    #[error("malformed pose record: {0}")]
    MalformedPose(String),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
