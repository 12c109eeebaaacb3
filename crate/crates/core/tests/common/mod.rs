#![allow(dead_code)]

use styleguide::numerics::{gaussian_noise, Image, RngStream, Shape};
use styleguide::style::{
    extract, feature_variance, feature_variance_grad, style_distance, style_distance_grad,
    Distance, PyramidConfig, StyleFeatures,
};

pub const FD_STEP: f64 = 1e-5;

pub fn noise_image(seed: u64, stream: u64, h: usize, w: usize, scale: f64) -> Image {
    gaussian_noise(
        Shape::new(h, w, 3).unwrap(),
        &mut RngStream::new(seed, stream),
    )
    .scaled(scale)
}

/// Central differences of `f` at every pixel of `x`.
pub fn central_differences(x: &Image, h: f64, mut f: impl FnMut(&Image) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + h;
            let up = f(&probe);
            probe.data_mut()[i] = v - h;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Relative error of the analytic style-distance gradient on one 8×8
/// instance with a three-level pyramid.
pub fn style_grad_error(seed: u64, metric: Distance) -> f64 {
    let pyr = PyramidConfig::new(3, 1e-8).unwrap();
    let w = [1.0, 2.0, 0.5];
    let x = noise_image(seed, 0, 8, 8, 0.5);
    let y: StyleFeatures = extract(&noise_image(seed, 1, 8, 8, 0.8), &pyr, &w).unwrap();
    let g = style_distance_grad(&x, &y, &pyr, &w, metric).unwrap();
    let fd = central_differences(&x, FD_STEP, |z| {
        style_distance(&extract(z, &pyr, &w).unwrap(), &y, metric).unwrap()
    });
    relative_error(g.data(), &fd)
}

/// Worst relative error of `∂ν_f/∂x_b` over a batch of three 8×8 images.
pub fn variance_grad_error(seed: u64) -> f64 {
    let pyr = PyramidConfig::new(3, 1e-8).unwrap();
    let w = [1.0, 2.0, 0.5];
    let batch: Vec<Image> = (0..3)
        .map(|b| noise_image(seed, 10 + b, 8, 8, 0.5))
        .collect();
    let (_, grads) = feature_variance_grad(&batch, &pyr, &w).unwrap();
    let mut worst: f64 = 0.0;
    for (b, g) in grads.iter().enumerate() {
        let fd = central_differences(&batch[b], FD_STEP, |z| {
            let feats: Vec<StyleFeatures> = batch
                .iter()
                .enumerate()
                .map(|(k, img)| extract(if k == b { z } else { img }, &pyr, &w).unwrap())
                .collect();
            feature_variance(&feats).unwrap()
        });
        worst = worst.max(relative_error(g.data(), &fd));
    }
    worst
}

/// One-sided sign test: P(X >= k) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut total = 0.0;
    let mut c = 1.0f64; // C(n, 0)
    for i in 0..=n {
        if i >= k {
            total += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    total / 2f64.powi(n as i32)
}
