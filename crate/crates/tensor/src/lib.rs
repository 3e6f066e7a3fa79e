//! Small dense tensor engine with a define-by-run tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; [`Tape::backward`] then
//! replays it in reverse. The engine is generic over [`Real`] so the same
//! graph code can run in `f32` for training and in `f64` for gradient checks.

mod adam;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::TensorError;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

pub type Result<T> = std::result::Result<T, TensorError>;
