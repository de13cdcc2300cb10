//! Generalized Gaussian process models: a GP prior on a latent function
//! combined with a single-parameter exponential-family likelihood, with
//! Taylor, Laplace, EP and KL-divergence approximate inference.

pub mod efd;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod numerics;

pub use error::{GgpmError, Result};
