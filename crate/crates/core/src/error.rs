use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pose falls outside the map at ({i}, {j})")]
    OutOfMap { i: i64, j: i64 },
    #[error("training diverged in epoch {epoch}; last stable parameters attached")]
    Diverged {
        epoch: usize,
        checkpoint: Box<crate::mapper::MapperParams>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] ndgrad::Error),
    #[error(transparent)]
    World(#[from] worldsim::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
