//! The classifier built from Gaussian convolution layers.

pub mod head;
pub mod kernels;
pub mod layer;
pub mod model;

pub use head::{argmax, classifier_forward, log_softmax, nll_log_softmax_backward, nll_loss, BatchNorm, BatchStats};
pub use kernels::{init_kernels, make_covariance, KernelGaussian, KernelSet, COVARIANCE_EPSILON};
pub use layer::{gcl_forward, gcl_stages, LayerSpec, LayerStages, Pipeline};
pub use model::{Model, ModelSpec, StepOutput};
