//! Hybrid deterministic / diffusion novel view synthesis.
//!
//! A bidirectional transformer reads Plücker-conditioned patch tokens of the
//! context views and a partially masked target view. Its per-token latents
//! feed two heads: a regression head that predicts RGB plus a per-pixel
//! confidence, and a small per-token diffusion denoiser. At inference,
//! confident patches are filled in one pass and the rest are sampled by
//! cosine-scheduled masked autoregressive diffusion.

pub mod backbone;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod patch_codec;
pub mod rng;
pub mod sampler;
pub mod selfcheck;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
