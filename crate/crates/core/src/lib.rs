//! Latent-diffusion binary segmentation with single-step direct latent
//! estimation, synthetic-data augmentation and an evaluation harness.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
