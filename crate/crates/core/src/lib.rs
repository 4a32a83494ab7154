pub mod autograd;
pub mod batchnorm;
pub mod conv;
pub mod degrade;
pub mod error;
pub mod gdu;
pub mod gradcheck;
pub mod imageio;
pub mod infer;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
