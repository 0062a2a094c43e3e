//! Multi-frequency learned image codec.

pub mod checkpoint;
pub mod coder;
pub mod conv;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod layers;
pub mod network;
pub mod octave;
pub mod real;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
