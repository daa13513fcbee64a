//! Readability screening and hybrid diffusion/VAE restoration of
//! fundus-like images, with the data generator, quality metrics, model
//! persistence and ablation harnesses around them.

pub mod checkpoint;
pub mod condfeat;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod readability;
pub mod vae;

pub use error::{Error, Result};
pub use image::ImageTensor;
