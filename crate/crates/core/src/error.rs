use std::path::PathBuf;

/// Errors produced by the avatar engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("skinning weights of vertex {vertex} are not convex (sum {sum}, min {min})")]
    NonConvexWeights { vertex: usize, sum: f32, min: f32 },

    #[error("non-manifold edge ({0}, {1}) is shared by more than two faces")]
    NonManifoldEdge(u32, u32),

    #[error("face {face} references vertex {vertex} but the mesh has {count} vertices")]
    FaceIndexOutOfRange { face: usize, vertex: u32, count: usize },

    #[error("subdivision level {level} exceeds the maximum {max}")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("hidden width {dim} is not divisible by {heads} attention heads")]
    HeadsIndivisible { dim: usize, heads: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("section {name} is truncated: need {needed} bytes, {available} available")]
    Truncated {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch in section {0}")]
    Checksum(String),

    #[error("missing section {0}")]
    MissingSection(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
