use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
    #[error("plane does not cut the unit cube: |D'| = {0} > 1")]
    PlaneOutsideCube(f64),
    #[error("too many planes: {given} > {max}")]
    TooManyPlanes { given: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("timestep {t} out of range [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss {loss} > {factor}x initial {initial}")]
    Diverged {
        step: u64,
        loss: f64,
        initial: f64,
        factor: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
