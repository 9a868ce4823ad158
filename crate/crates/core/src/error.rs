use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("reduction over an empty extent")]
    EmptyReduction,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not tracked on this tape")]
    NotTracked,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver exceeded {0} steps")]
    MaxStepsExceeded(usize),
    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    StepUnderflow { t: f64, dt: f64 },
    #[error("times are not monotone: {0}")]
    NonMonotoneTimes(String),

    #[error("series has no observed time points")]
    EmptySeries,
    #[error("model has no task head")]
    NoTaskHead,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("duplicate time {time} in sample {sample}")]
    DuplicateTime { sample: String, time: f64 },
    #[error("times of sample {0} are not strictly increasing after sorting")]
    NonMonotoneAfterSort(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("mask selects no entries")]
    EmptyMask,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("split has no heldout cells")]
    EmptyHeldout,

    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),
    #[error("sample not found: {0}")]
    SampleNotFound(String),
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
