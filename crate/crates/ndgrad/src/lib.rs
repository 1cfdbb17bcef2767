//! Dense reverse-mode autodiff on row-major `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! replays them in reverse, accumulating gradients additively into leaves.

mod array;
pub mod checks;
mod error;
mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod tape;

pub use array::Array;
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use nn::{lstm_step, CellVars, RecurrentCellParams};
pub use optim::{Adam, Sgd};
pub use params::{Bound, ParamSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Grads, Tape, Var, PROB_CLIP};
