//! Multi-scale style statistics and their exact gradients.
//!
//! Level `ℓ` of the pyramid is the input pooled `ℓ` times by 2x2 averaging,
//! expanded with [`diff_channels`] into identity, horizontal-difference and
//! vertical-difference channels. The style feature vector holds, per level,
//! the weighted channel means followed by the weighted channel standard
//! deviations (population form with a small variance floor):
//!
//! ```text
//! [λ_0 μ_0[0..3C], λ_0 σ_0[0..3C], λ_1 μ_1[..], λ_1 σ_1[..], ...]
//! ```
//!
//! Every map here is smooth (except the MAE kink), so gradients with respect
//! to pixels are assembled by hand: statistics → difference adjoint →
//! pooling adjoint, accumulated from the coarsest level down.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{
    avg_pool2, avg_pool2_backward, diff_channels, diff_channels_backward, Image, RngStream, Shape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Mae,
    Mse,
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distance::Mae => "mae",
            Distance::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    pub epsilon_var: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            epsilon_var: 1e-8,
        }
    }
}

impl PyramidConfig {
    pub fn new(levels: usize, epsilon_var: f64) -> Result<Self> {
        let cfg = Self {
            levels,
            epsilon_var,
        };
        if levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if !(epsilon_var >= 0.0) {
            return Err(Error::Config("epsilon_var must be non-negative".into()));
        }
        Ok(cfg)
    }

    /// Pooling `levels − 1` times needs both sides at least `2^(levels−1)`.
    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        let need = 1usize << (self.levels - 1);
        if shape.height < need || shape.width < need {
            return Err(Error::Dimension(format!(
                "{}x{} image too small for {} pyramid levels (need {need}x{need})",
                shape.height, shape.width, self.levels
            )));
        }
        Ok(())
    }

    /// Length of the feature vector for `channels` input channels.
    pub fn feature_len(&self, channels: usize) -> usize {
        self.levels * 2 * 3 * channels
    }
}

/// Equal weights over `levels` levels.
pub fn equal_weights(levels: usize) -> Vec<f64> {
    vec![1.0; levels]
}

fn check_weights(weights: &[f64], cfg: &PyramidConfig) -> Result<()> {
    if weights.len() != cfg.levels {
        return Err(Error::Config(format!(
            "{} level weights given for {} levels",
            weights.len(),
            cfg.levels
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config(
            "level weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Per-level channel means and standard deviations plus the level weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatures {
    /// Channels per level, i.e. `3 * C`.
    channels: usize,
    /// `levels * channels`, level-major.
    means: Vec<f64>,
    stds: Vec<f64>,
    weights: Vec<f64>,
}

impl StyleFeatures {
    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn channels_per_level(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Unweighted mean of channel `c` at level `level`.
    pub fn mean(&self, level: usize, c: usize) -> f64 {
        self.means[level * self.channels + c]
    }

    /// Unweighted std of channel `c` at level `level`.
    pub fn std(&self, level: usize, c: usize) -> f64 {
        self.stds[level * self.channels + c]
    }

    pub fn len(&self) -> usize {
        2 * self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Index range of level `level` in [`vector`](Self::vector).
    pub fn level_block(&self, level: usize) -> Range<usize> {
        let w = 2 * self.channels;
        level * w..(level + 1) * w
    }

    /// The weighted feature vector.
    pub fn vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for (l, &w) in self.weights.iter().enumerate() {
            let r = l * self.channels..(l + 1) * self.channels;
            v.extend(self.means[r.clone()].iter().map(|m| w * m));
            v.extend(self.stds[r].iter().map(|s| w * s));
        }
        v
    }

    /// Same statistics under different level weights.
    pub fn reweighted(&self, weights: &[f64]) -> Result<StyleFeatures> {
        if weights.len() != self.levels() {
            return Err(Error::Config(format!(
                "{} weights for {} levels",
                weights.len(),
                self.levels()
            )));
        }
        Ok(StyleFeatures {
            weights: weights.to_vec(),
            ..self.clone()
        })
    }

    /// Column labels matching [`csv_values`](Self::csv_values):
    /// `l{level}_{id|dx|dy}{channel}_{mean|std}`.
    pub fn csv_header(&self) -> Vec<String> {
        let cin = self.channels / 3;
        let mut out = Vec::with_capacity(self.len());
        for l in 0..self.levels() {
            for stat in ["mean", "std"] {
                for k in 0..self.channels {
                    let kind = ["id", "dx", "dy"][k / cin];
                    out.push(format!("l{l}_{kind}{}_{stat}", k % cin));
                }
            }
        }
        out
    }

    pub fn csv_values(&self) -> Vec<String> {
        self.vector().iter().map(|v| v.to_string()).collect()
    }

    /// Writes a header line and one value line.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Parse(format!("csv: {e}"));
        w.write_record(self.csv_header()).map_err(io)?;
        w.write_record(self.csv_values()).map_err(io)?;
        w.flush()
            .map_err(|e| Error::Parse(format!("csv flush: {e}")))?;
        Ok(())
    }
}

struct LevelTrace {
    shape: Shape,
    rep: Image,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Forward pass of the extractor, kept for the backward pass.
struct Trace {
    input: Shape,
    levels: Vec<LevelTrace>,
    weights: Vec<f64>,
}

impl Trace {
    fn forward(img: &Image, cfg: &PyramidConfig, weights: &[f64]) -> Result<Trace> {
        check_weights(weights, cfg)?;
        cfg.check_shape(img.shape())?;
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut current = img.clone();
        for l in 0..cfg.levels {
            if l > 0 {
                current = avg_pool2(&current)?;
            }
            let rep = diff_channels(&current);
            let k = rep.channels();
            let n = rep.shape().pixels() as f64;
            let mut mean = vec![0.0; k];
            for px in rep.data().chunks(k) {
                for (m, v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; k];
            for px in rep.data().chunks(k) {
                for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let std = var
                .iter()
                .map(|s| (s / n + cfg.epsilon_var).sqrt())
                .collect();
            levels.push(LevelTrace {
                shape: current.shape(),
                rep,
                mean,
                std,
            });
        }
        Ok(Trace {
            input: img.shape(),
            levels,
            weights: weights.to_vec(),
        })
    }

    fn features(&self) -> StyleFeatures {
        StyleFeatures {
            channels: self.levels[0].mean.len(),
            means: self
                .levels
                .iter()
                .flat_map(|l| l.mean.iter().copied())
                .collect(),
            stds: self
                .levels
                .iter()
                .flat_map(|l| l.std.iter().copied())
                .collect(),
            weights: self.weights.clone(),
        }
    }

    /// Pixel gradient of `<grad, vector()>`.
    fn backward(&self, grad: &[f64]) -> Image {
        let k = self.levels[0].mean.len();
        let mut acc: Option<Image> = None;
        for (l, lv) in self.levels.iter().enumerate().rev() {
            let w = self.weights[l];
            let block = &grad[l * 2 * k..(l + 1) * 2 * k];
            let n = lv.shape.pixels() as f64;
            let gm: Vec<f64> = block[..k].iter().map(|g| w * g / n).collect();
            let gs: Vec<f64> = block[k..]
                .iter()
                .zip(&lv.std)
                .map(|(g, s)| if *s > 0.0 { w * g / (n * s) } else { 0.0 })
                .collect();
            let mut gz = Image::zeros(lv.rep.shape());
            for (gpx, px) in gz.data_mut().chunks_mut(k).zip(lv.rep.data().chunks(k)) {
                for c in 0..k {
                    gpx[c] = gm[c] + gs[c] * (px[c] - lv.mean[c]);
                }
            }
            let mut gu = diff_channels_backward(lv.shape, &gz);
            if let Some(coarser) = acc.take() {
                gu.add_scaled_in_place(&avg_pool2_backward(lv.shape, &coarser), 1.0)
                    .expect("pyramid shapes line up");
            }
            acc = Some(gu);
        }
        let g = acc.expect("at least one level");
        debug_assert_eq!(g.shape(), self.input);
        g
    }
}

/// Style features of `img`.
pub fn extract(img: &Image, cfg: &PyramidConfig, weights: &[f64]) -> Result<StyleFeatures> {
    Ok(Trace::forward(img, cfg, weights)?.features())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "feature vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Distance between two weighted feature vectors.
pub fn vector_distance(a: &[f64], b: &[f64], metric: Distance) -> Result<f64> {
    check_same_len(a, b)?;
    let n = a.len() as f64;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match metric {
            Distance::Mae => (x - y).abs(),
            Distance::Mse => (x - y) * (x - y),
        })
        .sum();
    Ok(total / n)
}

/// `∂ distance / ∂ a`. The MAE subgradient at a zero difference is 0.
pub fn vector_distance_grad(a: &[f64], b: &[f64], metric: Distance) -> Result<Vec<f64>> {
    check_same_len(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            match metric {
                Distance::Mae => {
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                }
                Distance::Mse => 2.0 * d / n,
            }
        })
        .collect())
}

/// Mean absolute or mean squared difference of the weighted vectors.
pub fn style_distance(a: &StyleFeatures, b: &StyleFeatures, metric: Distance) -> Result<f64> {
    vector_distance(&a.vector(), &b.vector(), metric)
}

/// Distance from `extract(x)` to `f_ref` and its gradient w.r.t. `x`.
pub fn style_distance_and_grad(
    x: &Image,
    f_ref: &StyleFeatures,
    cfg: &PyramidConfig,
    weights: &[f64],
    metric: Distance,
) -> Result<(f64, Image)> {
    let trace = Trace::forward(x, cfg, weights)?;
    let fx = trace.features().vector();
    let fr = f_ref.vector();
    let d = vector_distance(&fx, &fr, metric)?;
    let g = vector_distance_grad(&fx, &fr, metric)?;
    Ok((d, trace.backward(&g)))
}

/// Gradient of `style_distance(extract(x), f_ref)` w.r.t. every pixel.
pub fn style_distance_grad(
    x: &Image,
    f_ref: &StyleFeatures,
    cfg: &PyramidConfig,
    weights: &[f64],
    metric: Distance,
) -> Result<Image> {
    Ok(style_distance_and_grad(x, f_ref, cfg, weights, metric)?.1)
}

/// Pixel gradient of `<v, extract(x).vector()>` for an arbitrary cotangent `v`.
pub fn features_vjp(x: &Image, cfg: &PyramidConfig, weights: &[f64], v: &[f64]) -> Result<Image> {
    let trace = Trace::forward(x, cfg, weights)?;
    if v.len() != cfg.feature_len(x.channels()) {
        return Err(Error::Dimension(format!(
            "cotangent length {} does not match feature length {}",
            v.len(),
            cfg.feature_len(x.channels())
        )));
    }
    Ok(trace.backward(v))
}

/// Per-level source indices drawn uniformly over the batch.
pub fn draw_mix_indices(batch: usize, levels: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::Config(
            "cannot mix features of an empty batch".into(),
        ));
    }
    Ok((0..levels).map(|_| rng.below(batch)).collect())
}

/// Assembles a feature set whose level `ℓ` block is copied from
/// `batch[indices[ℓ]]`.
pub fn mix_with_indices(batch: &[StyleFeatures], indices: &[usize]) -> Result<StyleFeatures> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Config("cannot mix features of an empty batch".into()))?;
    if indices.len() != first.levels() {
        return Err(Error::Config("one index per level required".into()));
    }
    let k = first.channels;
    let mut out = first.clone();
    for (l, &i) in indices.iter().enumerate() {
        let src = batch
            .get(i)
            .ok_or_else(|| Error::Config(format!("mix index {i} out of range")))?;
        if src.channels != k || src.levels() != first.levels() {
            return Err(Error::Dimension("batch features differ in layout".into()));
        }
        let r = l * k..(l + 1) * k;
        out.means[r.clone()].copy_from_slice(&src.means[r.clone()]);
        out.stds[r.clone()].copy_from_slice(&src.stds[r]);
        out.weights[l] = src.weights[l];
    }
    Ok(out)
}

/// Mixed features: each level is taken whole from a uniformly drawn member.
pub fn mixed_features(batch: &[StyleFeatures], rng: &mut RngStream) -> Result<StyleFeatures> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Config("cannot mix features of an empty batch".into()))?;
    let idx = draw_mix_indices(batch.len(), first.levels(), rng)?;
    mix_with_indices(batch, &idx)
}

/// `ν_f`: mean over coordinates of the across-batch population variance of
/// the weighted feature vectors.
pub fn feature_variance(batch: &[StyleFeatures]) -> Result<f64> {
    let vecs: Vec<Vec<f64>> = batch.iter().map(|f| f.vector()).collect();
    Ok(variance_and_cotangents(&vecs)?.0)
}

fn variance_and_cotangents(vecs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if vecs.len() < 2 {
        return Err(Error::Config(format!(
            "feature variance needs a batch of at least 2, got {}",
            vecs.len()
        )));
    }
    let dim = vecs[0].len();
    for v in vecs {
        check_same_len(&vecs[0], v)?;
    }
    let b = vecs.len() as f64;
    // shifted by the first member so identical batches give exact zeros
    let mut mean = vecs[0].clone();
    for v in &vecs[1..] {
        for ((m, x), x0) in mean.iter_mut().zip(v).zip(&vecs[0]) {
            *m += (x - x0) / b;
        }
    }
    let mut nu = 0.0;
    let cots = vecs
        .iter()
        .map(|v| {
            v.iter()
                .zip(&mean)
                .map(|(x, m)| {
                    nu += (x - m) * (x - m);
                    2.0 * (x - m) / (b * dim as f64)
                })
                .collect()
        })
        .collect();
    Ok((nu / (b * dim as f64), cots))
}

/// `ν_f` over a batch of images together with `∂ν_f/∂image_b` for each member.
pub fn feature_variance_grad(
    images: &[Image],
    cfg: &PyramidConfig,
    weights: &[f64],
) -> Result<(f64, Vec<Image>)> {
    let traces: Vec<Trace> = images
        .iter()
        .map(|x| Trace::forward(x, cfg, weights))
        .collect::<Result<_>>()?;
    let vecs: Vec<Vec<f64>> = traces.iter().map(|t| t.features().vector()).collect();
    let (nu, cots) = variance_and_cotangents(&vecs)?;
    let grads = traces
        .iter()
        .zip(&cots)
        .map(|(t, c)| t.backward(c))
        .collect();
    Ok((nu, grads))
}
