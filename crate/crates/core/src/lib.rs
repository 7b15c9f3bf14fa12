//! Toy-scale latent diffusion with tuning-free personalization.
//!
//! A reference latent is DDIM-inverted into a trajectory. During generation a
//! second pass of the same denoiser replays that trajectory and its attention
//! features are injected into the generating pass: masked self-attention
//! injection of reference keys/values, and concept-encoder tokens appended to
//! the cross-attention context. Everything is deterministic for a fixed seed.

pub mod encoder;
pub mod error;
pub mod formats;
pub mod golden;
pub mod image;
pub mod injector;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
