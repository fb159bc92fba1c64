use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch between {left} ({left_dim}) and {right} ({right_dim})")]
    DimensionMismatch {
        left: String,
        left_dim: usize,
        right: String,
        right_dim: usize,
    },

    #[error("unroll length must be non-negative, got {0}")]
    NonPositiveUnroll(i64),

    #[error("hyperparameter layout: {0}")]
    Layout(String),

    #[error("hyperparameter coordinate {coordinate} = {value} lies outside [{lower}, {upper}]")]
    Infeasible {
        coordinate: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("non-finite inner gradient")]
    NonFiniteGradient,

    #[error("non-finite inner state at step {step}")]
    NonFiniteState { step: usize },

    #[error("trajectory does not belong to this problem: {0}")]
    TrajectoryMismatch(String),

    #[error("coordinate {coordinate} is within {epsilon} of its box boundary")]
    BoundaryTooClose { coordinate: usize, epsilon: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("unroll is not contractive: eta * lambda_max = {0} >= 2")]
    NonContractive(f64),

    #[error("too few usable points to fit a rate ({0})")]
    InsufficientData(usize),

    #[error("outer loop diverged at step {step}: f = {value}")]
    DivergenceDetected { step: usize, value: f64 },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("weight segment has length {segment} but the data references {expected} weights")]
    WeightSegmentMismatch { segment: usize, expected: usize },

    #[error("inconsistent feature dimension: expected {expected}, episode {episode} has {found}")]
    InconsistentFeatureDim {
        episode: usize,
        expected: usize,
        found: usize,
    },

    #[error("meta-batch of {batch} requested from {available} episodes")]
    BatchTooLarge { batch: usize, available: usize },

    #[error("bad generator parameters: {0}")]
    BadParams(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
