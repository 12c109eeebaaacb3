use super::{DataLaw, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Image, RngStream, Shape};

/// Isotropic Gaussian data law `x0 ~ N(m, sigma0^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    pub mean: Image,
    pub sigma0: f64,
}

impl GaussianData {
    pub fn new(mean: Image, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        Ok(Self { mean, sigma0 })
    }

    /// Marginal variance of `x_t` per pixel: `ᾱ σ0² + 1 − ᾱ`.
    pub fn marginal_var(&self, alpha_bar: f64) -> f64 {
        alpha_bar * self.sigma0 * self.sigma0 + 1.0 - alpha_bar
    }

    /// Posterior shrinkage `c_t = σ0² / (ᾱ σ0² + 1 − ᾱ)`, so that
    /// `E[x0 | x_t] = m + √ᾱ c_t (x_t − √ᾱ m)`.
    pub fn shrinkage(&self, alpha_bar: f64) -> f64 {
        self.sigma0 * self.sigma0 / self.marginal_var(alpha_bar)
    }

    /// Closed-form optimum of the per-step affine noise predictor:
    /// the coefficient on `x_t`.
    pub fn optimal_slope(&self, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() / self.marginal_var(alpha_bar)
    }

    /// `E[x0 | x_t]`.
    pub fn posterior_mean(&self, x_t: &Image, alpha_bar: f64) -> Result<Image> {
        x_t.check_same_shape(&self.mean)?;
        let sa = alpha_bar.sqrt();
        let k = sa * self.shrinkage(alpha_bar);
        let data = x_t
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(&x, &m)| m + k * (x - sa * m))
            .collect();
        Image::from_vec(x_t.shape(), data)
    }
}

/// Exact `E[ε | x_t]` under the Gaussian data law.
///
/// Written as `√(1−ᾱ) (x_t − √ᾱ m) / (ᾱ σ0² + 1 − ᾱ)`, which equals
/// `(x_t − √ᾱ E[x0|x_t]) / √(1−ᾱ)` without the cancellation near ᾱ → 1.
pub fn analytic_gaussian_eps(
    x_t: &Image,
    t: usize,
    sched: &NoiseSchedule,
    data: &GaussianData,
) -> Result<Image> {
    x_t.check_same_shape(&data.mean)?;
    let ab = sched.alpha_bar_checked(t)?;
    let sa = ab.sqrt();
    let k = (1.0 - ab).sqrt() / data.marginal_var(ab);
    let out = x_t
        .data()
        .iter()
        .zip(data.mean.data())
        .map(|(&x, &m)| k * (x - sa * m))
        .collect();
    Image::from_vec(x_t.shape(), out)
}

impl Denoiser for GaussianData {
    fn predict(&self, x_t: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
        analytic_gaussian_eps(x_t, t, sched, self)
    }

    fn shape(&self) -> Shape {
        self.mean.shape()
    }

    fn x0_jacobian(&self, t: usize, sched: &NoiseSchedule) -> Option<f64> {
        let ab = sched.alpha_bar_checked(t).ok()?;
        Some(ab.sqrt() * self.shrinkage(ab))
    }
}

impl DataLaw for GaussianData {
    fn sample_x0(&self, rng: &mut RngStream) -> Image {
        self.mean.map(|m| m + self.sigma0 * rng.normal())
    }

    fn shape(&self) -> Shape {
        self.mean.shape()
    }

    fn log_density(&self, x: &Image) -> Result<f64> {
        x.check_same_shape(&self.mean)?;
        let var = self.sigma0 * self.sigma0;
        let sq: f64 = x
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(a, m)| (a - m).powi(2))
            .sum();
        let d = x.len() as f64;
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var)
    }
}
