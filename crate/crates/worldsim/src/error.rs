use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("could not generate a valid scene after {attempts} attempts (seed {seed})")]
    Infeasible { seed: u64, attempts: usize },
    #[error("target class {0} is not present in the scene")]
    ClassAbsent(usize),
    #[error("target class {class} unreachable from pose {pose}")]
    Unreachable { class: usize, pose: String },
    #[error("invalid pose {0}")]
    InvalidPose(String),
    #[error("scene file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
