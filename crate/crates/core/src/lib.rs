pub mod autograd;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
