use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("softmax row {row} is masked everywhere")]
    DegenerateRow { row: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("timestep {t} outside [0, {t_max})")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("unknown category {0}")]
    UnknownCategory(String),

    #[error("category {0} appears more than once")]
    DuplicateCategory(usize),

    #[error("empty segment: {0}")]
    EmptySegment(String),

    #[error("mask value {0} outside [0, 1]")]
    MaskRange(f64),

    #[error("{dim} = {value} is not divisible by patch size {patch}")]
    Indivisible { dim: &'static str, value: usize, patch: usize },

    #[error("schedule index {index} out of range (T = {t_max})")]
    ScheduleIndex { index: usize, t_max: usize },

    #[error("cache has {got} layers, model has {expected}")]
    LayerMismatch { expected: usize, got: usize },

    #[error("mode/cache mismatch: {0}")]
    ModeMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("timer resolution insufficient: {detail}")]
    TimerResolution { detail: String },

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for faults caused by NaN/Inf propagation rather than bad input.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::DegenerateRow { .. } | Error::Divergence { .. }
        )
    }
}
