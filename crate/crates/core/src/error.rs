use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),

    #[error("impossible observation: reward {reward} at ({state},{action}) has zero probability under the belief")]
    ImpossibleObservation {
        state: usize,
        action: usize,
        reward: usize,
    },

    #[error("resource limit exceeded: {what} needs {needed}, budget is {budget}")]
    Resource {
        what: &'static str,
        needed: u128,
        budget: u128,
    },

    #[error("KL divergence is infinite: {0}")]
    InfiniteKl(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("bound violated: {0}")]
    BoundViolated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
