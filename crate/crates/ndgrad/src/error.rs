use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Contract { op, msg: msg.into() }
}
