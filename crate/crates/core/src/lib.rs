//! Patch-based continuous image super-resolution with exact spatial
//! derivatives, a latent generative prior, and latent-space inverse solvers.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prior;
pub mod radon;
pub mod sampler;
pub mod solvers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
