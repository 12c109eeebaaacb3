//! Inference-time style guidance as perturbations of the reverse-step mean.
//!
//! All modes share one shape: `μ̂ = μ ∓ s_t Σ_t ∇_{x_t} J`, where `J` is the
//! mode's objective evaluated on the clean estimate x̂₀ (or on `x_t` itself
//! for the noisy-pair ablation) and `s_t` is the base scale, optionally
//! divided by `√Σ_t`.
//!
//! - supervised: `J = d(f(x̂₀), f(y))`, subtracted
//! - contrastive: `J = ν_f`, the batch variance of style features, added
//! - synonymous: `J = d(f(x̂₀), f_m)` with `f_m` a per-step random per-level
//!   mix of the batch's own features, subtracted

use rayon::prelude::*;

use crate::denoisers::Denoiser;
use crate::diffusion::{NoiseSchedule, StepOutput};
use crate::error::{Error, Result};
use crate::numerics::{avg_pool2, avg_pool2_backward, Image, RngStream};
use crate::style::{
    draw_mix_indices, extract, feature_variance_grad, mix_with_indices, style_distance_and_grad,
    Distance, PyramidConfig, StyleFeatures,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Supervised,
    Contrastive,
    Synonymous,
}

impl GuidanceMode {
    pub fn is_self_guided(self) -> bool {
        matches!(self, GuidanceMode::Contrastive | GuidanceMode::Synonymous)
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::None => "none",
            GuidanceMode::Supervised => "supervised",
            GuidanceMode::Contrastive => "contrastive",
            GuidanceMode::Synonymous => "synonymous",
        })
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "supervised" => Ok(GuidanceMode::Supervised),
            "contrastive" => Ok(GuidanceMode::Contrastive),
            "synonymous" => Ok(GuidanceMode::Synonymous),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }
}

/// Which image the style objective is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidancePair {
    /// The one-shot clean estimate x̂₀.
    X0hat,
    /// The noisy state `x_t`.
    Xt,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub s0: f64,
    pub adaptive: bool,
    pub distance: Distance,
    pub pair: GuidancePair,
    pub weights: Vec<f64>,
    pub gamma_c: f64,
    pub grad_through_eps: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::None,
            s0: 0.0,
            adaptive: true,
            distance: Distance::Mae,
            pair: GuidancePair::X0hat,
            weights: vec![1.0; 4],
            gamma_c: 0.0,
            grad_through_eps: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 >= 0.0 && self.s0.is_finite()) {
            return Err(Error::Config(format!(
                "s0 must be finite and >= 0, got {}",
                self.s0
            )));
        }
        if !(self.gamma_c >= 0.0 && self.gamma_c.is_finite()) {
            return Err(Error::Config(format!(
                "gamma_c must be finite and >= 0, got {}",
                self.gamma_c
            )));
        }
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(
                "guidance weights must be non-empty and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Guidance scale at step `t`: `s0`, or `s0 / √Σ_t` when adaptive.
///
/// `Σ_1 = β̃_1 = 0`, so the adaptive form falls back to `√β_1` there.
pub fn effective_scale(config: &GuidanceConfig, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    if !config.adaptive {
        return Ok(config.s0);
    }
    let var = sched.posterior_var(t);
    let denom = if var > 0.0 { var } else { sched.beta(t) };
    Ok(config.s0 / denom.sqrt())
}

/// Everything one guided step needs besides the model outputs.
#[derive(Debug, Clone)]
pub struct GuidanceContext {
    pub config: GuidanceConfig,
    pub pyramid: PyramidConfig,
    reference: Option<StyleFeatures>,
    mix_rng: RngStream,
}

#[derive(Debug, Clone)]
pub struct GuidanceOutcome {
    pub means: Vec<Image>,
    pub mean_distance: f64,
    pub grad_norm: f64,
    pub scale: f64,
}

impl GuidanceContext {
    /// `reference` holds the style target for supervised mode and must be
    /// absent otherwise. `mix_rng` feeds the per-step level draws of
    /// synonymous mode.
    pub fn new(
        config: GuidanceConfig,
        pyramid: PyramidConfig,
        reference: Option<StyleFeatures>,
        mix_rng: RngStream,
    ) -> Result<Self> {
        config.validate()?;
        if config.weights.len() != pyramid.levels {
            return Err(Error::Config(format!(
                "{} guidance weights for {} pyramid levels",
                config.weights.len(),
                pyramid.levels
            )));
        }
        match (config.mode, &reference) {
            (GuidanceMode::Supervised, None) => {
                return Err(Error::Config(
                    "supervised guidance requires a style reference".into(),
                ))
            }
            (GuidanceMode::Supervised, Some(_)) => {}
            (mode, Some(_)) if mode.is_self_guided() => {
                return Err(Error::Config(format!(
                    "{mode} guidance takes no style reference"
                )))
            }
            _ => {}
        }
        // compare the reference under the guidance weights
        let reference = match reference {
            Some(r) => Some(r.reweighted(&config.weights)?),
            None => None,
        };
        Ok(Self {
            config,
            pyramid,
            reference,
            mix_rng,
        })
    }

    /// Supervised context from a reference image.
    pub fn supervised(
        config: GuidanceConfig,
        pyramid: PyramidConfig,
        reference: &Image,
        mix_rng: RngStream,
    ) -> Result<Self> {
        let f = extract(reference, &pyramid, &config.weights)?;
        Self::new(config, pyramid, Some(f), mix_rng)
    }

    pub fn reference(&self) -> Option<&StyleFeatures> {
        self.reference.as_ref()
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.config.mode.is_self_guided() && batch_size < 2 {
            return Err(Error::Config(format!(
                "{} guidance needs batch size >= 2 (batch variance / mixing), got {batch_size}",
                self.config.mode
            )));
        }
        Ok(())
    }

    pub fn needs_twin(&self) -> bool {
        self.config.mode == GuidanceMode::Contrastive && self.config.gamma_c > 0.0
    }

    /// Factor turning a gradient taken at the guided image into one w.r.t. `x_t`.
    fn chain_factor(&self, t: usize, sched: &NoiseSchedule, model: &dyn Denoiser) -> Result<f64> {
        match self.config.pair {
            GuidancePair::Xt => Ok(1.0),
            GuidancePair::X0hat => {
                if self.config.grad_through_eps {
                    model.x0_jacobian(t, sched).ok_or_else(|| {
                        Error::Config(
                            "grad_through_eps needs a denoiser with a closed-form x0 Jacobian"
                                .into(),
                        )
                    })
                } else {
                    Ok(1.0 / sched.alpha_bar_checked(t)?.sqrt())
                }
            }
        }
    }

    fn guided_images<'a>(&self, steps: &'a [StepOutput], x_t: &'a [Image]) -> Vec<&'a Image> {
        match self.config.pair {
            GuidancePair::X0hat => steps.iter().map(|s| &s.x0_hat).collect(),
            GuidancePair::Xt => x_t.iter().collect(),
        }
    }

    /// Perturbs the batch's means at step `t` according to the mode.
    pub fn apply(
        &mut self,
        steps: &[StepOutput],
        x_t: &[Image],
        t: usize,
        sched: &NoiseSchedule,
        model: &dyn Denoiser,
        twin_x0: Option<&[Image]>,
    ) -> Result<GuidanceOutcome> {
        if steps.len() != x_t.len() {
            return Err(Error::Dimension(
                "step outputs and states differ in batch size".into(),
            ));
        }
        self.validate(steps.len())?;
        match self.config.mode {
            GuidanceMode::None => Ok(GuidanceOutcome {
                means: steps.iter().map(|s| s.mean.clone()).collect(),
                mean_distance: 0.0,
                grad_norm: 0.0,
                scale: 0.0,
            }),
            GuidanceMode::Supervised => supervised_perturb(steps, x_t, t, sched, self, model),
            GuidanceMode::Contrastive => {
                contrastive_perturb(steps, x_t, t, sched, self, model, twin_x0)
            }
            GuidanceMode::Synonymous => {
                let mut rng = self.mix_rng.substream(t as u64);
                let indices = draw_mix_indices(steps.len(), self.pyramid.levels, &mut rng)?;
                synonymous_perturb(steps, x_t, t, sched, self, model, &indices)
            }
        }
    }
}

fn finite_or_diverged(g: &Image, t: usize, chain: usize) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedChain {
            step: t,
            chain,
            reason: "non-finite guidance gradient".into(),
        })
    }
}

/// `μ − k g` per chain, where `k = s_t Σ_t` (negative `k` adds).
fn shift_means(steps: &[StepOutput], grads: &[Image], k: f64) -> Result<Vec<Image>> {
    steps
        .iter()
        .zip(grads)
        .map(|(s, g)| s.mean.add_scaled(g, -k))
        .collect()
}

fn mean_norm(grads: &[Image]) -> f64 {
    grads.iter().map(Image::norm).sum::<f64>() / grads.len().max(1) as f64
}

/// Pulls each chain toward the reference style:
/// `μ̂ = μ − s_t Σ_t ∇_{x_t} d(f(x̂₀), f(y))`.
pub fn supervised_perturb(
    steps: &[StepOutput],
    x_t: &[Image],
    t: usize,
    sched: &NoiseSchedule,
    ctx: &GuidanceContext,
    model: &dyn Denoiser,
) -> Result<GuidanceOutcome> {
    let reference = ctx
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("supervised guidance requires a style reference".into()))?;
    let scale = effective_scale(&ctx.config, t, sched)?;
    let factor = ctx.chain_factor(t, sched, model)?;
    let imgs = ctx.guided_images(steps, x_t);
    let cfg = &ctx.config;
    let results: Vec<(f64, Image)> = imgs
        .par_iter()
        .enumerate()
        .map(|(b, img)| {
            let (d, g) =
                style_distance_and_grad(img, reference, &ctx.pyramid, &cfg.weights, cfg.distance)?;
            let g = g.scaled(factor);
            finite_or_diverged(&g, t, b)?;
            Ok((d, g))
        })
        .collect::<Result<_>>()?;
    let (dists, grads): (Vec<f64>, Vec<Image>) = results.into_iter().unzip();
    let k = scale * sched.posterior_var(t);
    Ok(GuidanceOutcome {
        means: shift_means(steps, &grads, k)?,
        mean_distance: dists.iter().sum::<f64>() / dists.len() as f64,
        grad_norm: mean_norm(&grads),
        scale,
    })
}

/// Mean squared difference between the coarsest pooled rasters of `x` and
/// `anchor`, with its gradient w.r.t. `x`.
pub fn content_anchor(x: &Image, anchor: &Image, levels: usize) -> Result<(f64, Image)> {
    x.check_same_shape(anchor)?;
    let mut shapes = vec![x.shape()];
    let (mut px, mut pa) = (x.clone(), anchor.clone());
    for _ in 1..levels {
        px = avg_pool2(&px)?;
        pa = avg_pool2(&pa)?;
        shapes.push(px.shape());
    }
    let n = px.len() as f64;
    let diff = px.sub(&pa)?;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let mut g = diff.scaled(2.0 / n);
    for s in shapes[..shapes.len() - 1].iter().rev() {
        g = avg_pool2_backward(*s, &g);
    }
    Ok((value, g))
}

/// Spreads the batch apart in style space:
/// `μ̂_b = μ_b + s_t Σ_t ∇_{x_t^b} ν_f`, minus `γ_c` times the content
/// anchor gradient when twin estimates are supplied.
pub fn contrastive_perturb(
    steps: &[StepOutput],
    x_t: &[Image],
    t: usize,
    sched: &NoiseSchedule,
    ctx: &GuidanceContext,
    model: &dyn Denoiser,
    twin_x0: Option<&[Image]>,
) -> Result<GuidanceOutcome> {
    ctx.validate(steps.len())?;
    let scale = effective_scale(&ctx.config, t, sched)?;
    let factor = ctx.chain_factor(t, sched, model)?;
    let imgs: Vec<Image> = ctx.guided_images(steps, x_t).into_iter().cloned().collect();
    let (nu, mut grads) = feature_variance_grad(&imgs, &ctx.pyramid, &ctx.config.weights)?;

    if ctx.config.gamma_c > 0.0 {
        if let Some(twins) = twin_x0 {
            if twins.len() != steps.len() {
                return Err(Error::Dimension("twin batch size differs".into()));
            }
            // the anchor acts on x̂₀; rescale it into the guided image's frame
            let anchor_factor = match ctx.config.pair {
                GuidancePair::X0hat => 1.0,
                GuidancePair::Xt if ctx.config.grad_through_eps => {
                    model.x0_jacobian(t, sched).unwrap_or(0.0)
                }
                GuidancePair::Xt => 1.0 / sched.alpha_bar(t).sqrt(),
            };
            for ((g, s), tw) in grads.iter_mut().zip(steps).zip(twins) {
                let (_, ga) = content_anchor(&s.x0_hat, tw, ctx.pyramid.levels)?;
                g.add_scaled_in_place(&ga, -ctx.config.gamma_c * anchor_factor)?;
            }
        }
    }

    let grads: Vec<Image> = grads.into_iter().map(|g| g.scaled(factor)).collect();
    for (b, g) in grads.iter().enumerate() {
        finite_or_diverged(g, t, b)?;
    }
    let k = scale * sched.posterior_var(t);
    Ok(GuidanceOutcome {
        means: shift_means(steps, &grads, -k)?,
        mean_distance: nu,
        grad_norm: mean_norm(&grads),
        scale,
    })
}

/// Pulls every chain toward one shared mixed target `f_m`, built by taking
/// level `ℓ` from chain `indices[ℓ]`. `f_m` is held constant in the gradient.
pub fn synonymous_perturb(
    steps: &[StepOutput],
    x_t: &[Image],
    t: usize,
    sched: &NoiseSchedule,
    ctx: &GuidanceContext,
    model: &dyn Denoiser,
    indices: &[usize],
) -> Result<GuidanceOutcome> {
    ctx.validate(steps.len())?;
    let scale = effective_scale(&ctx.config, t, sched)?;
    let factor = ctx.chain_factor(t, sched, model)?;
    let imgs = ctx.guided_images(steps, x_t);
    let cfg = &ctx.config;
    let feats: Vec<StyleFeatures> = imgs
        .par_iter()
        .map(|x| extract(x, &ctx.pyramid, &cfg.weights))
        .collect::<Result<_>>()?;
    let target = mix_with_indices(&feats, indices)?;
    let results: Vec<(f64, Image)> = imgs
        .par_iter()
        .enumerate()
        .map(|(b, img)| {
            let (d, g) =
                style_distance_and_grad(img, &target, &ctx.pyramid, &cfg.weights, cfg.distance)?;
            let g = g.scaled(factor);
            finite_or_diverged(&g, t, b)?;
            Ok((d, g))
        })
        .collect::<Result<_>>()?;
    let (dists, grads): (Vec<f64>, Vec<Image>) = results.into_iter().unzip();
    let k = scale * sched.posterior_var(t);
    Ok(GuidanceOutcome {
        means: shift_means(steps, &grads, k)?,
        mean_distance: dists.iter().sum::<f64>() / dists.len() as f64,
        grad_norm: mean_norm(&grads),
        scale,
    })
}
