//! Noise predictors implementing the ε̂(x_t, t) contract.

mod affine;
mod gaussian;
mod gmm;

pub use affine::{train_affine, AffineDenoiser, TrainConfig, TrainOutcome};
pub use gaussian::{analytic_gaussian_eps, GaussianData};
pub use gmm::{analytic_gmm_eps, GmmComponent, GmmData};

use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::numerics::{Image, RngStream, Shape};

/// Predicts the noise component of `x_t` at step `t`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image>;

    /// Image shape the model operates on.
    fn shape(&self) -> Shape;

    /// Scalar `d x̂₀ / d x_t` when x̂₀ is affine in `x_t` with an isotropic
    /// Jacobian; `None` when no closed form exists.
    fn x0_jacobian(&self, _t: usize, _sched: &NoiseSchedule) -> Option<f64> {
        None
    }
}

/// Source of clean training images.
pub trait DataLaw: Send + Sync {
    fn sample_x0(&self, rng: &mut RngStream) -> Image;

    fn shape(&self) -> Shape;

    /// Log density of a clean image under the law.
    fn log_density(&self, x: &Image) -> Result<f64>;
}
