//! Style-guided diffusion sampling at desk scale.
//!
//! The crate pairs a DDPM-style ancestral sampler with inference-time style
//! guidance: supervised guidance toward a reference image's style features,
//! contrastive self guidance that spreads a batch apart in style space, and
//! synonymous self guidance that pulls a batch toward a randomly mixed shared
//! style. Denoisers are closed-form (Gaussian and Gaussian-mixture data laws)
//! or a small trainable per-timestep affine model, and style features come
//! from a fixed differentiable image pyramid, so every gradient in the
//! pipeline has an exact hand-derived form that can be checked against
//! finite differences.

pub mod baselines;
pub mod denoisers;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod style;

pub use error::{Error, Result};
pub use numerics::{Image, RngStream};
