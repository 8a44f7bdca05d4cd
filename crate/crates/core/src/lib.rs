//! Hierarchical multimodal style transfer.
//!
//! A three-stage feed-forward network (style, enhance and refine subnets)
//! trained against a hierarchy of perceptual stylization losses, able to
//! stylize large images in one forward pass.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;
pub mod kernels;
pub mod loss_network;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
