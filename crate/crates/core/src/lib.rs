//! Masked-patch conditional diffusion autoencoder.
//!
//! A ViT encoder reads only the visible patches of an image; a diffusion
//! decoder denoises the masked patches conditioned on the encoder latents.
//! The trained model inpaints masked regions by ancestral sampling and its
//! encoder initializes a small classifier.

pub mod error;
pub mod evalmetrics;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod params;
pub mod patching;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
