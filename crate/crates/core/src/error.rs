use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input set")]
    EmptySet,

    #[error("least-squares design matrix is rank deficient")]
    DegenerateFit,

    #[error("too few points for a curve fit: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    UnknownToken { id: u32, vocab_size: usize },

    #[error("caption of length {len} exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("timestep {t} out of range for schedule with T = {timesteps}")]
    BadTimestep { t: usize, timesteps: usize },

    #[error("training diverged at iteration {iter} (loss = {loss})")]
    TrainingDiverged { iter: usize, loss: f64 },

    #[error("invalid noise policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad dataset manifest: {0}")]
    BadManifest(String),

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("image has zero feature response and cannot be normalized")]
    DegenerateFeature,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("existing results in {0} were produced by a different study configuration")]
    StudyConflict(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
