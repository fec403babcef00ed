use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("growth table has no entry for position {0}")]
    MissingTableSite(f64),
    #[error("growth assumptions violated: {0}")]
    Assumption(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("population must be positive at every site (site {site} has {mass})")]
    NonPositivePopulation { site: usize, mass: f64 },
    #[error("ball radius delta*R/h = {0} is not a positive integer number of sites")]
    FractionalBall(f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("site {site} reached mass {mass} above n_max {n_max} at t = {time}")]
    CeilingBreached {
        site: usize,
        mass: f64,
        n_max: f64,
        time: f64,
    },
    #[error("ball around site {0} carries no mass")]
    EmptyBall(usize),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("explicit scheme unstable at step {step} (t = {time}, max |n| = {max_abs})")]
    Unstable { step: usize, time: f64, max_abs: f64 },
    #[error("time step {dt} exceeds the stability limit {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("invalid pde input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("invalid prediction input: {0}")]
    Input(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("site {0} carries no population mass")]
    EmptySite(usize),
    #[error("sampling weights have no overlap with the population")]
    ZeroDenominator,
    #[error("invalid analysis input: {0}")]
    Input(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
