use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volatility of {instrument} is non-positive ({value}) at t = {t}")]
    NonPositiveVolatility { instrument: String, t: f64, value: f64 },

    #[error("correlation matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid correlation matrix: {0}")]
    BadCorrelation(String),

    #[error("control box requires 0 < epsilon < b_inf, got epsilon = {epsilon}, b_inf = {upper}")]
    BadBox { epsilon: f64, upper: f64 },

    #[error("holding {index} = {value} lies outside the control box [{lo}, {hi}]")]
    OutOfBox { index: usize, value: f64, lo: f64, hi: f64 },

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("optimizer failure: {0}")]
    OptimizerFailure(String),

    #[error("schedule node {node}: {source}")]
    AtNode {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("green holding {index} has zero intensity, so a positive tax rate has no finite response")]
    ZeroBetaWithTax { index: usize },

    #[error("green target {target} unreachable: attainable range is [{min}, {max}]")]
    UnreachableTarget { target: f64, min: f64, max: f64 },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("price series share no common dates")]
    EmptyIntersection,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("ticker {0} is missing from the price or metadata input")]
    MissingTicker(String),

    #[error("HJB layer {layer} did not converge after {iterations} fixed-point iterations")]
    NonConvergence { layer: usize, iterations: usize },

    #[error("HJB layer {layer} produced a positive value function ({value:e})")]
    UnstableStep { layer: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input was produced under design hash {found}, the current configuration has {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for invalid input, 3 for numerical failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AtNode { source, .. } => source.exit_code(),
            Error::OptimizerFailure(_)
            | Error::NonConvergence { .. }
            | Error::UnstableStep { .. }
            | Error::DegenerateSeries(_) => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn at_node(node: usize, e: Error) -> Error {
        Error::AtNode { node, source: Box::new(e) }
    }
}
