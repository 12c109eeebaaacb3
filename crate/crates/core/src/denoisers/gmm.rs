use super::{DataLaw, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Image, RngStream, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Image,
    pub sigma: f64,
}

/// Mixture of isotropic Gaussians in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmData {
    components: Vec<GmmComponent>,
}

impl GmmData {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(Error::Config(format!(
                    "component {k} weight must be positive"
                )));
            }
            if !(c.sigma > 0.0) {
                return Err(Error::Config(format!(
                    "component {k} sigma must be positive"
                )));
            }
            if c.mean.shape() != shape {
                return Err(Error::Dimension(format!(
                    "component {k} mean shape {:?} differs from {:?}",
                    c.mean.shape(),
                    shape
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// Equal-weight mixture over the given means, shared sigma.
    pub fn uniform(means: Vec<Image>, sigma: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        let comps = means
            .into_iter()
            .map(|mean| GmmComponent {
                weight: w,
                mean,
                sigma,
            })
            .collect::<Vec<_>>();
        // equal weights may miss 1.0 by a few ulps
        let mut gmm = Self { components: comps };
        let total: f64 = gmm.components.iter().map(|c| c.weight).sum();
        if let Some(last) = gmm.components.last_mut() {
            last.weight += 1.0 - total;
        }
        Self::new(gmm.components)
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Posterior component responsibilities `r_k(x_t)` under the marginal
    /// `p(x_t) = Σ w_k N(√ᾱ m_k, (ᾱ σ_k² + 1 − ᾱ) I)`.
    pub fn responsibilities(&self, x_t: &Image, alpha_bar: f64) -> Result<Vec<f64>> {
        let sa = alpha_bar.sqrt();
        let d = x_t.len() as f64;
        let mut logits = Vec::with_capacity(self.components.len());
        for c in &self.components {
            x_t.check_same_shape(&c.mean)?;
            let v = alpha_bar * c.sigma * c.sigma + 1.0 - alpha_bar;
            let sq: f64 = x_t
                .data()
                .iter()
                .zip(c.mean.data())
                .map(|(&x, &m)| (x - sa * m).powi(2))
                .sum();
            logits.push(c.weight.ln() - 0.5 * d * v.ln() - 0.5 * sq / v);
        }
        let lse = log_sum_exp(&logits);
        let r: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        // large logits cost a few ulps of relative precision in lse
        let total: f64 = r.iter().sum();
        Ok(r.into_iter().map(|v| v / total).collect())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact `E[ε | x_t]` under the mixture: responsibility-weighted average of
/// the per-component Gaussian answers.
pub fn analytic_gmm_eps(
    x_t: &Image,
    t: usize,
    sched: &NoiseSchedule,
    data: &GmmData,
) -> Result<Image> {
    let ab = sched.alpha_bar_checked(t)?;
    let sa = ab.sqrt();
    let sn = (1.0 - ab).sqrt();
    let resp = data.responsibilities(x_t, ab)?;
    let mut out = Image::zeros(x_t.shape());
    for (c, &r) in data.components.iter().zip(&resp) {
        if r == 0.0 {
            continue;
        }
        let v = ab * c.sigma * c.sigma + 1.0 - ab;
        let k = r * sn / v;
        for ((o, &x), &m) in out.data_mut().iter_mut().zip(x_t.data()).zip(c.mean.data()) {
            *o += k * (x - sa * m);
        }
    }
    Ok(out)
}

impl Denoiser for GmmData {
    fn predict(&self, x_t: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
        analytic_gmm_eps(x_t, t, sched, self)
    }

    fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }
}

impl DataLaw for GmmData {
    fn sample_x0(&self, rng: &mut RngStream) -> Image {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        c.mean.map(|m| m + c.sigma * rng.normal())
    }

    fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }

    fn log_density(&self, x: &Image) -> Result<f64> {
        let d = x.len() as f64;
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            x.check_same_shape(&c.mean)?;
            let var = c.sigma * c.sigma;
            let sq: f64 = x
                .data()
                .iter()
                .zip(c.mean.data())
                .map(|(a, m)| (a - m).powi(2))
                .sum();
            terms.push(
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var,
            );
        }
        Ok(log_sum_exp(&terms))
    }
}
