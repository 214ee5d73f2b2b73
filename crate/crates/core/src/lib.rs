pub mod autoencoder;
pub mod bitstream;
pub mod codec;
pub mod context;
pub mod determinism;
pub mod error;
pub mod metrics;
mod layers;
pub mod model;
pub mod quantizer;
pub mod synthetic;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use layers::Linear;
pub use tensor::{Numerics, Reduction, Tensor};
