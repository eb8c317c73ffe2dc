use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates its documented bounds.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A caller broke an operation's precondition (shapes, index ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A request is well formed but cannot be served (e.g. empty strokes).
    #[error("{0}")]
    Usage(String),
    /// The sampler cannot drive a model trained with this objective.
    #[error("sampler `{sampler}` is incompatible with a `{objective}` model")]
    IncompatibleSampler { sampler: String, objective: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
