use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("grid too small: n = {0}, need at least 4")]
    GridTooSmall(usize),
    #[error("blow-up at step {step}")]
    BlowUp { step: usize },
    #[error("no observations: interval {interval} exceeds grid size {n}")]
    NoObservations { interval: usize, n: usize },
    #[error("observation index {index} out of range for grid of size {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("simulation blow-up in run {run}")]
    RunBlowUp { run: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("sampling diverged at diffusion step {t}")]
    SamplingDiverged { t: usize },
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error(
        "wrong checkpoint for this observation interval: checkpoint p = {checkpoint}, observation p = {observation}"
    )]
    IntervalMismatch { checkpoint: usize, observation: usize },
    #[error("degenerate transform at grid point {grid}: smallest eigenvalue {min_eig:e}")]
    DegenerateTransform { grid: usize, min_eig: f64 },
    #[error("singular innovation matrix")]
    SingularInnovation,
    #[error("DA step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
