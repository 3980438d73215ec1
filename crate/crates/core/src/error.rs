use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("scene generation failed for scene_index {scene_index}: occlusion quota unmet after {attempts} attempts")]
    Generation { scene_index: usize, attempts: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error at {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },

    #[error("rle decode error: {0}")]
    RleDecode(String),

    #[error("instance {instance_id} in scene {scene_id} violates invariant: {what}")]
    InvariantViolation {
        scene_id: usize,
        instance_id: usize,
        what: String,
    },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("timestep {t} out of range [0, {t_train})")]
    TimestepRange { t: usize, t_train: usize },

    #[error("category id {id} out of range (have {count})")]
    CategoryRange { id: usize, count: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("prior cache error: {0}")]
    PriorCache(String),

    #[error("{0}")]
    Other(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
