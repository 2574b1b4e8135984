use thiserror::Error;

#[derive(Debug, Error)]
pub enum DkfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("singular window starting at index {index} (size {size})")]
    SingularWindow { index: usize, size: usize },
    #[error("singular collapse pivot for entry ({i}, {j})")]
    SingularPivot { i: usize, j: usize },
    #[error("spectral radius {rho} of the JOR multiplier is not below 1; try a smaller gamma")]
    NotContractive { rho: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("fusion subgraph for state {state} is disconnected under the communication graph")]
    DisconnectedFusion { state: usize },
    #[error("band overflow: entry ({i}, {j}) lies outside the {l}-band")]
    BandOverflow { i: usize, j: usize, l: usize },
    #[error("locality violation: sensor {sensor} needs state {state} outside its neighbourhood")]
    Locality { sensor: usize, state: usize },
    #[error("band entries around index {index} are not available locally")]
    MissingBand { index: usize },
    #[error("no route from sensor {src} to sensor {dst}")]
    NoRoute { src: usize, dst: usize },
    #[error("payload of {scalars} scalars exceeds the limit {limit}")]
    PayloadLimit { scalars: usize, limit: usize },
    #[error("filter diverged at step {step} (trace {trace:e})")]
    Diverged { step: usize, trace: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DkfError>;
