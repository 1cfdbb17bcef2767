//! Semantic mapping and goal-directed navigation on top of `worldsim`.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mapper;
pub mod nav;
pub mod navpolicy;
pub mod trainer;

pub use error::{Error, Result};
