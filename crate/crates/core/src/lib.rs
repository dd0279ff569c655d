pub mod audio;
pub mod darts;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
