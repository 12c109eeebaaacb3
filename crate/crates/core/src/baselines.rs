//! Post-hoc style transfer applied to finished samples, for the two-step
//! comparison: an iterative optimizer in the spirit of Gatys et al. and a
//! one-shot moment matcher in the spirit of AdaIN. Both work in the same
//! pyramid feature space the guidance uses.

use crate::error::{Error, Result};
use crate::numerics::Image;
use crate::style::{style_distance_and_grad, Distance, PyramidConfig, StyleFeatures};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Weight of the pixel MSE pull toward the content image.
    pub content_weight: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_size: 10.0,
            content_weight: 1.0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.content_weight >= 0.0 && self.content_weight.is_finite()) {
            return Err(Error::Config(format!(
                "content_weight must be >= 0, got {}",
                self.content_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub image: Image,
    /// Loss before each update, plus the final loss.
    pub losses: Vec<f64>,
}

fn transfer_loss(
    x: &Image,
    content: &Image,
    style_ref: &StyleFeatures,
    pyramid: &PyramidConfig,
    gamma: f64,
) -> Result<(f64, Image)> {
    let (style, mut g) =
        style_distance_and_grad(x, style_ref, pyramid, style_ref.weights(), Distance::Mse)?;
    let n = x.len() as f64;
    let diff = x.sub(content)?;
    let content_term = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    g.add_scaled_in_place(&diff, 2.0 * gamma / n)?;
    Ok((style + gamma * content_term, g))
}

/// Plain gradient descent on
/// `MSE(f(x), style_ref) + γ · mean((x − content)²)` starting at `content`.
/// The style term uses the reference's own level weights.
pub fn iterative_transfer(
    content: &Image,
    style_ref: &StyleFeatures,
    pyramid: &PyramidConfig,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    cfg.validate()?;
    let mut x = content.clone();
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let (loss, g) = transfer_loss(&x, content, style_ref, pyramid, cfg.content_weight)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::DivergedChain {
                step: it,
                chain: 0,
                reason: "non-finite transfer loss".into(),
            });
        }
        losses.push(loss);
        if it < cfg.iterations {
            x.add_scaled_in_place(&g, -cfg.step_size)?;
        }
    }
    Ok(TransferResult { image: x, losses })
}

/// Re-normalizes each colour channel so its mean and std match the
/// reference's finest-level statistics. Channels with zero variance are
/// passed through untouched.
pub fn moment_match_transfer(
    content: &Image,
    style_stats: &StyleFeatures,
    pyramid: &PyramidConfig,
) -> Result<Image> {
    let c = content.channels();
    if style_stats.channels_per_level() != 3 * c {
        return Err(Error::Dimension(format!(
            "style statistics describe {} colour channels, image has {c}",
            style_stats.channels_per_level() / 3
        )));
    }
    let n = content.shape().pixels() as f64;
    let mut out = content.clone();
    for ch in 0..c {
        let vals: Vec<f64> = content.data().iter().skip(ch).step_by(c).copied().collect();
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let own_std = (var + pyramid.epsilon_var).sqrt();
        if var <= 0.0 || (own_std == style_stats.std(0, ch) && mu == style_stats.mean(0, ch)) {
            continue;
        }
        // match the raw variance so the recomputed std (with epsilon) lands exactly
        let target_std = style_stats.std(0, ch);
        let target_var = (target_std * target_std - pyramid.epsilon_var).max(0.0);
        let k = (target_var / var).sqrt();
        let mu_y = style_stats.mean(0, ch);
        for v in out.data_mut().iter_mut().skip(ch).step_by(c) {
            *v = (*v - mu) * k + mu_y;
        }
    }
    Ok(out)
}
