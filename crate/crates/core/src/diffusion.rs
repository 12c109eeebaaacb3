//! Noise schedule, closed-form forward diffusion, the one-shot clean-image
//! estimate, and the ancestral reverse sampler with a guidance hook.

use rayon::prelude::*;

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::GuidanceContext;
use crate::numerics::{gaussian_noise, Image, RngStream, Shape};

/// Magnitude beyond which a chain is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Linear β schedule with its derived cumulative products and posterior
/// variances. Steps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let posterior_vars = betas
            .iter()
            .enumerate()
            .map(|(i, b)| b * (1.0 - alpha_bars[i]) / (1.0 - alpha_bars[i + 1]))
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            posterior_vars,
        })
    }

    /// T=100, β linear from 0.001 to 0.2.
    pub fn desk_default() -> Self {
        make_schedule(100, 0.001, 0.2).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, valid for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar_checked(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t])
    }
}

/// Linear β schedule over `steps` steps, inclusive of both endpoints.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| beta_start + span * i as f64).collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε` for a given noise image.
pub fn forward_diffuse_with_noise(
    x0: &Image,
    eps: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let ab = sched.alpha_bar_checked(t)?;
    x0.scaled(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())
}

/// Draws `x_t ~ q(x_t | x0)` in closed form.
pub fn forward_diffuse(
    x0: &Image,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Image> {
    sched.check_step(t)?;
    let eps = gaussian_noise(x0.shape(), rng);
    forward_diffuse_with_noise(x0, &eps, t, sched)
}

/// One-shot clean estimate `x̂₀ = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn estimate_x0(x_t: &Image, eps_hat: &Image, t: usize, sched: &NoiseSchedule) -> Result<Image> {
    let ab = sched.alpha_bar_checked(t)?;
    if ab < 1e-12 {
        return Err(Error::NumericGuard(format!(
            "alpha_bar at t={t} is {ab:e}, too small to invert"
        )));
    }
    x_t.check_same_shape(eps_hat)?;
    let (sn, inv_sa) = ((1.0 - ab).sqrt(), 1.0 / ab.sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - sn * e) * inv_sa)
        .collect();
    Image::from_vec(x_t.shape(), data)
}

/// Reverse-step mean `(x_t − β_t/√(1−ᾱ_t) ε̂) / √(1−β_t)`.
pub fn posterior_mean(
    x_t: &Image,
    eps_hat: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let ab = sched.alpha_bar_checked(t)?;
    x_t.check_same_shape(eps_hat)?;
    let beta = sched.beta(t);
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - k * e) * inv)
        .collect();
    Image::from_vec(x_t.shape(), data)
}

/// Everything the model says about one reverse step of one chain.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mean: Image,
    /// Σ_t, shared by every pixel.
    pub variance: f64,
    pub eps_hat: Image,
    pub x0_hat: Image,
}

pub fn step_output(
    model: &dyn Denoiser,
    x_t: &Image,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<StepOutput> {
    let eps_hat = model.predict(x_t, t, sched)?;
    let x0_hat = estimate_x0(x_t, &eps_hat, t, sched)?;
    let mean = posterior_mean(x_t, &eps_hat, t, sched)?;
    Ok(StepOutput {
        mean,
        variance: sched.posterior_var(t),
        eps_hat,
        x0_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    /// Mean over chains of the guidance objective (distance to the
    /// reference or mixed target; ν_f for contrastive).
    pub mean_distance: f64,
    /// Mean over chains of the guidance gradient norm w.r.t. `x_t`.
    pub grad_norm: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SamplerOptions {
    pub record_telemetry: bool,
    /// Guidance is skipped for `t < guide_from_step`. 0 or 1 guides every step.
    pub guide_from_step: usize,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub images: Vec<Image>,
    pub telemetry: Vec<StepTelemetry>,
}

const INIT_TAG: u64 = 0x1A17;
const STEP_TAG: u64 = 0x57E9;

/// Noise stream for chain `chain` at step `t` (t = T+1 is the initial draw).
fn chain_noise(rng: &RngStream, chain: usize, t: usize, shape: Shape, init: bool) -> Image {
    let tag = if init { INIT_TAG } else { STEP_TAG };
    let mut s = rng.substream_path(&[tag, chain as u64, t as u64]);
    gaussian_noise(shape, &mut s)
}

fn check_chain(x: &Image, step: usize, chain: usize) -> Result<()> {
    for v in x.data() {
        if !v.is_finite() {
            return Err(Error::DivergedChain {
                step,
                chain,
                reason: "non-finite value".into(),
            });
        }
        if v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::DivergedChain {
                step,
                chain,
                reason: format!("|x| = {:e} exceeds {DIVERGENCE_LIMIT:e}", v.abs()),
            });
        }
    }
    Ok(())
}

/// Ancestral sampling from `t = T` down to `t = 1`.
///
/// Each step computes the model's [`StepOutput`] per chain, lets the
/// guidance context perturb the means (a batch-wide barrier), then draws
/// `x_{t−1} ~ N(μ̂, β̃_t I)`. The last step returns `μ̂` without noise.
/// Every chain/step noise draw comes from its own sub-stream of `rng`, so the
/// result does not depend on thread scheduling.
pub fn sample(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    batch_size: usize,
    mut guidance: Option<&mut GuidanceContext>,
    rng: &RngStream,
    opts: &SamplerOptions,
) -> Result<SampleRun> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(ctx) = guidance.as_deref() {
        ctx.validate(batch_size)?;
    }
    let shape = model.shape();
    let steps = sched.steps();
    let mut xs: Vec<Image> = (0..batch_size)
        .into_par_iter()
        .map(|b| chain_noise(rng, b, steps + 1, shape, true))
        .collect();
    // unguided twin chains sharing the noise streams, for the content anchor
    let mut twins: Option<Vec<Image>> = guidance
        .as_deref()
        .filter(|ctx| ctx.needs_twin())
        .map(|_| xs.clone());
    let mut telemetry = Vec::new();

    for t in (1..=steps).rev() {
        let outs: Vec<StepOutput> = xs
            .par_iter()
            .map(|x| step_output(model, x, t, sched))
            .collect::<Result<_>>()?;
        let twin_outs: Option<Vec<StepOutput>> = match &twins {
            Some(tw) => Some(
                tw.par_iter()
                    .map(|x| step_output(model, x, t, sched))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };

        let guide_now = t >= opts.guide_from_step.max(1);
        let means: Vec<Image> = match guidance.as_deref_mut() {
            Some(ctx) if guide_now => {
                let twin_x0: Option<Vec<Image>> = twin_outs
                    .as_ref()
                    .map(|o| o.iter().map(|s| s.x0_hat.clone()).collect());
                let outcome = ctx.apply(&outs, &xs, t, sched, model, twin_x0.as_deref())?;
                if opts.record_telemetry {
                    telemetry.push(StepTelemetry {
                        step: t,
                        mean_distance: outcome.mean_distance,
                        grad_norm: outcome.grad_norm,
                        scale: outcome.scale,
                    });
                }
                outcome.means
            }
            _ => {
                if opts.record_telemetry {
                    telemetry.push(StepTelemetry {
                        step: t,
                        mean_distance: 0.0,
                        grad_norm: 0.0,
                        scale: 0.0,
                    });
                }
                outs.iter().map(|o| o.mean.clone()).collect()
            }
        };

        let sigma = sched.posterior_var(t).sqrt();
        let advance = |b: usize, mean: &Image| -> Result<Image> {
            if t == 1 {
                Ok(mean.clone())
            } else {
                let z = chain_noise(rng, b, t, shape, false);
                mean.add_scaled(&z, sigma)
            }
        };
        xs = means
            .par_iter()
            .enumerate()
            .map(|(b, m)| {
                let x = advance(b, m)?;
                check_chain(&x, t, b)?;
                Ok(x)
            })
            .collect::<Result<_>>()?;
        if let (Some(tw), Some(to)) = (twins.as_mut(), twin_outs.as_ref()) {
            *tw = to
                .par_iter()
                .enumerate()
                .map(|(b, o)| advance(b, &o.mean))
                .collect::<Result<_>>()?;
        }
    }

    Ok(SampleRun {
        images: xs,
        telemetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::GaussianData;

    fn pixel(v: f64) -> Image {
        Image::filled(Shape::new(1, 1, 1).unwrap(), v)
    }

    #[test]
    fn constant_beta_products() {
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        let expect = [1.0, 0.9, 0.81, 0.729];
        for (a, e) in s.alpha_bars().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_posterior_var_is_zero() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn default_schedule_reaches_noise() {
        let s = NoiseSchedule::desk_default();
        assert_eq!(s.steps(), 100);
        assert!((s.beta(1) - 0.001).abs() < 1e-15);
        assert!((s.beta(100) - 0.2).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 1e-4);
    }

    #[test]
    fn schedule_invariants() {
        for (n, lo, hi) in [
            (1, 0.2, 0.2),
            (10, 0.01, 0.5),
            (100, 0.001, 0.2),
            (1000, 1e-4, 0.02),
        ] {
            let s = make_schedule(n, lo, hi).unwrap();
            for t in 1..=n {
                let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))).abs()
                    / s.alpha_bar(t);
                assert!(rel < 1e-12);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.posterior_var(t) <= s.beta(t));
                if t >= 2 {
                    assert!(s.posterior_var(t) > 0.0);
                }
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(matches!(make_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(5, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(5, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_schedule(5, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_with_zero_noise_scales() {
        let s = make_schedule(10, 0.05, 0.2).unwrap();
        let x0 = Image::filled(Shape::new(2, 2, 3).unwrap(), 0.7);
        let out = forward_diffuse_with_noise(&x0, &Image::zeros(x0.shape()), 4, &s).unwrap();
        let k = s.alpha_bar(4).sqrt();
        assert!(out.data().iter().all(|v| (v - 0.7 * k).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_bad_step() {
        let s = make_schedule(10, 0.05, 0.2).unwrap();
        let x0 = pixel(0.0);
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            forward_diffuse(&x0, 0, &s, &mut rng),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            forward_diffuse(&x0, 11, &s, &mut rng),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn forward_marginal_moments() {
        // ᾱ = 0.64 at t = 1; x0 ≡ 1 → mean 0.8, variance 0.36
        let s = make_schedule(1, 0.36, 0.36).unwrap();
        let x0 = Image::filled(Shape::new(1, 1, 1).unwrap(), 1.0);
        let mut rng = RngStream::new(3, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_diffuse(&x0, 1, &s, &mut rng).unwrap().data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.8).abs() < 0.008, "mean {mean}");
        assert!((var - 0.36).abs() < 0.0036, "var {var}");
    }

    #[test]
    fn forward_at_tiny_alpha_bar_is_standard_normal() {
        let s = make_schedule(200, 0.05, 0.3).unwrap();
        assert!(s.alpha_bar(200) < 1e-10);
        let x0 = Image::filled(Shape::new(100, 100, 1).unwrap(), 5.0);
        let out = forward_diffuse(&x0, 200, &s, &mut RngStream::new(1, 1)).unwrap();
        let mean = out.mean();
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05);
    }

    #[test]
    fn x0_inverts_forward_with_true_noise() {
        let s = NoiseSchedule::desk_default();
        let shape = Shape::new(4, 4, 3).unwrap();
        let x0 = gaussian_noise(shape, &mut RngStream::new(1, 0)).scaled(0.5);
        let eps = gaussian_noise(shape, &mut RngStream::new(2, 0));
        for t in [1, 25, 50, 75, 100] {
            let xt = forward_diffuse_with_noise(&x0, &eps, t, &s).unwrap();
            let back = estimate_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn x0_with_zero_eps_and_hand_value() {
        let s = make_schedule(1, 0.36, 0.36).unwrap();
        let zero = estimate_x0(&pixel(0.5), &pixel(0.0), 1, &s).unwrap();
        assert!((zero.data()[0] - 0.5 / 0.8).abs() < 1e-15);
        let v = estimate_x0(&pixel(0.5), &pixel(0.25), 1, &s).unwrap();
        assert!((v.data()[0] - 0.4375).abs() < 1e-12);
    }

    #[test]
    fn x0_guard_on_vanishing_alpha_bar() {
        let s = make_schedule(1000, 0.5, 0.5).unwrap();
        assert!(s.alpha_bar(1000) < 1e-12);
        assert!(matches!(
            estimate_x0(&pixel(0.0), &pixel(0.0), 1000, &s),
            Err(Error::NumericGuard(_))
        ));
    }

    #[test]
    fn posterior_mean_hand_values() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        let zero = posterior_mean(&pixel(0.95), &pixel(0.0), 1, &s).unwrap();
        assert!((zero.data()[0] - 0.95 / 0.9f64.sqrt()).abs() < 1e-15);
        let mu = posterior_mean(&pixel(0.95), &pixel(0.3162), 1, &s).unwrap();
        assert!((mu.data()[0] - 0.8960).abs() < 1e-4, "{}", mu.data()[0]);
        let doubled = posterior_mean(&pixel(1.9), &pixel(0.6324), 1, &s).unwrap();
        assert!((doubled.data()[0] - 2.0 * mu.data()[0]).abs() < 1e-14);
    }

    #[test]
    fn final_mean_equals_x0_estimate() {
        let s = NoiseSchedule::desk_default();
        let x = pixel(0.3);
        let e = pixel(-0.7);
        let a = posterior_mean(&x, &e, 1, &s).unwrap();
        let b = estimate_x0(&x, &e, 1, &s).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn step_output_consistent() {
        let s = NoiseSchedule::desk_default();
        let shape = Shape::new(3, 3, 3).unwrap();
        let data = GaussianData::new(Image::filled(shape, 0.2), 0.1).unwrap();
        let x = gaussian_noise(shape, &mut RngStream::new(6, 0));
        let out = step_output(&data, &x, 40, &s).unwrap();
        assert!(out.variance > 0.0);
        let x0 = estimate_x0(&x, &out.eps_hat, 40, &s).unwrap();
        for (a, b) in x0.data().iter().zip(out.x0_hat.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unguided_sampling_is_deterministic_and_thread_independent() {
        let s = make_schedule(20, 0.01, 0.3).unwrap();
        let shape = Shape::new(4, 4, 3).unwrap();
        let data = GaussianData::new(Image::filled(shape, 0.1), 0.1).unwrap();
        let rng = RngStream::new(77, 0);
        let opts = SamplerOptions::default();
        let a = sample(&data, &s, 5, None, &rng, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| sample(&data, &s, 5, None, &rng, &opts).unwrap());
        assert_eq!(a.images, b.images);
        // a batch of 3 reproduces the first three chains of a batch of 5
        let c = sample(&data, &s, 3, None, &rng, &opts).unwrap();
        assert_eq!(&a.images[..3], &c.images[..]);
    }

    #[test]
    fn zero_batch_rejected() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let data = GaussianData::new(pixel(0.0), 0.1).unwrap();
        let err = sample(
            &data,
            &s,
            0,
            None,
            &RngStream::new(0, 0),
            &SamplerOptions::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
