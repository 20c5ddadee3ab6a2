pub mod autograd;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod complexity;
pub mod entropy;
pub mod error;
pub mod hft;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod range_coder;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
