use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("variable does not belong to this tape")]
    Provenance,
    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite state at integration step {step}")]
    Divergence { step: usize },
    #[error("ensemble has no particles")]
    DegenerateEnsemble,
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("trajectory log is empty")]
    EmptyLog,
    #[error("complexity metric undefined: zero parameter norm at grid point {index}")]
    UndefinedMetric { index: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("divergence at epoch {epoch}, batch {batch}: {source}")]
    TrainingDivergence {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } | Error::TrainingDivergence { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
