//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),

    #[error("allocation matrix construction failed: {0}")]
    Allocation(String),

    #[error("singular actuator configuration: {0}")]
    SingularConfiguration(String),

    #[error("servo identification failed: {0}")]
    Identification(String),

    #[error("trajectory planning failed: {0}")]
    Planning(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("QP solve failed: {0}")]
    QpFailure(String),

    #[error("scenario configuration invalid: {0}")]
    Config(String),

    #[error("metrics computation failed: {0}")]
    Metrics(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
