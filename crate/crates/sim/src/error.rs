use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duration `{what}` must be finite and >= 0, got {value}")]
    Duration { what: String, value: f64 },

    #[error("cost vector has no backbone operators")]
    EmptyBackbone,

    #[error("schedule bound violated: {0}")]
    Bound(String),

    #[error("dependency cycle among ops {0:?}")]
    Cycle(Vec<usize>),

    #[error("op {op} depends on unknown op {dep}")]
    UnknownDependency { op: usize, dep: usize },

    #[error("unsupported strategy: {0}")]
    Strategy(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error(transparent)]
    Model(#[from] scmoe_core::Error),
}

impl SimError {
    pub(crate) fn duration(what: impl Into<String>, value: f64) -> Self {
        SimError::Duration {
            what: what.into(),
            value,
        }
    }
}
