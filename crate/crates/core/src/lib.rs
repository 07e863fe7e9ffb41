pub mod attention;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
