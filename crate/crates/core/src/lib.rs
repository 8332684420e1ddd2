//! Stochastic text embeddings for text-video retrieval on synthetic data.
//!
//! Each text is represented as a mass around its embedding rather than a
//! point: a radius conditioned on text-frame similarities scales Gaussian
//! noise. Training combines a contrastive loss on sampled texts with a loss
//! on a support text placed on the mass boundary toward the paired video.

pub mod error;
pub mod math;
pub mod encoders;
pub mod text_mass;
pub mod model;
pub mod objectives;
pub mod dataset;
pub mod evaluation;
pub mod trainer;
pub mod config;
pub mod checkpoint;
pub mod workbench;

pub use error::{Error, Result};
