pub mod autodiff;
pub mod config;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod io;
pub mod maps;
pub mod net;
pub mod occupancy;
pub mod renderer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
