//! Desk-scale unified multimodal transformer: one decoder stack that both
//! answers text queries about images (autoregressive next-token prediction)
//! and generates images/video clips from text (diffusion denoising).

pub mod adaln;
pub mod block;
pub mod cli;
pub mod config;
pub mod connectors;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod language;
pub mod masking;
pub mod model;
pub mod param;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::HaploError;
pub use param::Parameter;
pub use tensor::{Scalar, Tensor};
