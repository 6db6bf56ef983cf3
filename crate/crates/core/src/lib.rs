//! Gaussian mixture convolution networks.
//!
//! Data and kernels are Gaussian mixtures; convolution between them is exact
//! and closed-form. Nonlinearities are handled by refitting mixtures, and
//! pooling by mixture reduction plus domain rescaling.

pub mod activation;
pub mod autodiff;
mod error;
pub mod gaussian;
pub mod harness;
pub mod input;
pub mod linalg;
pub mod network;
pub mod reduce;
pub mod serialize;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{
    convolution_layer, convolve_mixtures, eval_gaussian, eval_grid, eval_mixture, mixture_integral,
    rescale_domain, BoundingBox, DomainScale, Gaussian, Grid, MixtureBatch,
};
