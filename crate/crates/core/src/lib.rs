//! Single-step latent diffusion segmentation with representation alignment.

pub mod alignment;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
