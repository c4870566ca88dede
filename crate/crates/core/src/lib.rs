//! Speaker embedding engine built around residual selective-kernel blocks and
//! multi-scale statistics pooling.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod gradsuite;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod param;
pub mod pipeline;
pub mod pooling;
pub mod real;
pub mod scoring;
pub mod sk;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor3;
