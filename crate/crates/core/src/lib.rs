//! GS-Net: a CNN backbone followed by a global self-attention module (GSAM)
//! and a three-way classifier.
//!
//! GSAM runs a channel attention module (CAM) and a spatial attention module
//! (SAM) in parallel over the backbone feature map and fuses their outputs with
//! the input through three learnable scalars. Everything sits on a small
//! channel-last rank-4 tensor type with a tape-based reverse-mode autodiff.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gsam;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Matrix, Shape4, Tensor};
