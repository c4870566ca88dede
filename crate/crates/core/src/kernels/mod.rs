//! Dense numeric kernels with forward and backward passes.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_batch, ConvSpec};
pub use norm::{BatchNorm, Mode};
