use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} exceed the budget of {limit}")]
    Budget { what: &'static str, limit: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("non-finite value in {param}: {value}")]
    NonFinite { param: String, value: f64 },

    #[error("internal inconsistency: {0}")]
    Internal(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}
