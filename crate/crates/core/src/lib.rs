pub mod attack;
pub mod classifier;
pub mod cli;
pub mod color;
pub mod detector;
pub mod enhancement;
pub mod error;
pub mod fcnn;
pub mod harness;
pub mod image;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;
