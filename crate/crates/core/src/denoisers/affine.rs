use std::fmt::Write as _;
use std::path::Path;

use super::{DataLaw, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_noise, Image, RngStream, Shape};

/// Per-timestep affine noise predictor `ε̂ = a_t x_t + b_t m̂`.
///
/// Rich enough to represent the exact denoiser of a Gaussian data law, which
/// gives SGD on the noise-prediction loss a known optimum to converge to.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDenoiser {
    a: Vec<f64>,
    b: Vec<f64>,
    m_hat: Image,
}

impl AffineDenoiser {
    pub fn new(a: Vec<f64>, b: Vec<f64>, m_hat: Image) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::Config(format!(
                "coefficient arrays must be non-empty and equal length, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { a, b, m_hat })
    }

    /// All coefficients zero: predicts ε̂ ≡ 0.
    pub fn zeros(steps: usize, m_hat: Image) -> Self {
        Self {
            a: vec![0.0; steps],
            b: vec![0.0; steps],
            m_hat,
        }
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn slope(&self, t: usize) -> f64 {
        self.a[t - 1]
    }

    pub fn offset(&self, t: usize) -> f64 {
        self.b[t - 1]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.a
    }

    pub fn offsets(&self) -> &[f64] {
        &self.b
    }

    pub fn bias_image(&self) -> &Image {
        &self.m_hat
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.a.len() {
            return Err(Error::Index {
                t,
                max: self.a.len(),
            });
        }
        Ok(())
    }

    /// Flat text form: a header, one `t a_t b_t` line per step, then `m̂`
    /// as one line of `width * channels` values per raster row.
    pub fn to_text(&self) -> String {
        let s = self.m_hat.shape();
        let mut out = String::new();
        writeln!(out, "affine-denoiser v1").unwrap();
        writeln!(out, "steps {}", self.a.len()).unwrap();
        writeln!(out, "shape {} {} {}", s.height, s.width, s.channels).unwrap();
        for (i, (a, b)) in self.a.iter().zip(&self.b).enumerate() {
            writeln!(out, "{} {} {}", i + 1, a, b).unwrap();
        }
        writeln!(out, "mhat").unwrap();
        let row = s.width * s.channels;
        for chunk in self.m_hat.data().chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("affine model truncated before {what}")))
        };
        if next("header")?.trim() != "affine-denoiser v1" {
            return Err(Error::Parse("not an affine-denoiser v1 file".into()));
        }
        let steps: usize = keyed(next("steps")?, "steps")?
            .first()
            .copied()
            .ok_or_else(|| Error::Parse("missing step count".into()))?;
        let dims = keyed::<usize>(next("shape")?, "shape")?;
        if dims.len() != 3 {
            return Err(Error::Parse("shape needs three dimensions".into()));
        }
        let shape = Shape::new(dims[0], dims[1], dims[2])?;
        let mut a = Vec::with_capacity(steps);
        let mut b = Vec::with_capacity(steps);
        for expect in 1..=steps {
            let fields: Vec<&str> = next("coefficients")?.split_whitespace().collect();
            if fields.len() != 3 || parse::<usize>(fields[0])? != expect {
                return Err(Error::Parse(format!("bad coefficient line for t={expect}")));
            }
            a.push(parse(fields[1])?);
            b.push(parse(fields[2])?);
        }
        if next("mhat")?.trim() != "mhat" {
            return Err(Error::Parse("expected mhat block".into()));
        }
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.height {
            for tok in next("raster row")?.split_whitespace() {
                data.push(parse(tok)?);
            }
        }
        Self::new(a, b, Image::from_vec(shape, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse<T: std::str::FromStr>(tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Parse(format!("cannot parse {tok:?}")))
}

fn keyed<T: std::str::FromStr>(line: &str, key: &str) -> Result<Vec<T>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(Error::Parse(format!("expected {key:?} line, got {line:?}")));
    }
    it.map(parse).collect()
}

impl Denoiser for AffineDenoiser {
    fn predict(&self, x_t: &Image, t: usize, _sched: &NoiseSchedule) -> Result<Image> {
        self.check_t(t)?;
        x_t.check_same_shape(&self.m_hat)?;
        let (a, b) = (self.a[t - 1], self.b[t - 1]);
        let data = x_t
            .data()
            .iter()
            .zip(self.m_hat.data())
            .map(|(&x, &m)| a * x + b * m)
            .collect();
        Image::from_vec(x_t.shape(), data)
    }

    fn shape(&self) -> Shape {
        self.m_hat.shape()
    }

    fn x0_jacobian(&self, t: usize, sched: &NoiseSchedule) -> Option<f64> {
        let ab = sched.alpha_bar_checked(t).ok()?;
        let a = *self.a.get(t.checked_sub(1)?)?;
        Some((1.0 - (1.0 - ab).sqrt() * a) / ab.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Clean draws averaged to initialise `m̂`.
    pub init_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 50_000,
            batch_size: 32,
            init_samples: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AffineDenoiser,
    /// Mean of the last 100 batch losses.
    pub final_loss: f64,
    /// Batch loss `mean_i ||ε_i − ε̂_i||²` per iteration.
    pub losses: Vec<f64>,
}

/// Minibatch SGD on `E ||ε − ε̂(x_t, t)||²` with `t ~ U{1..T}`.
///
/// `a` and `b` start at zero; `m̂` starts at the empirical mean of
/// `init_samples` clean draws so the `b_t m̂` term has a usable direction.
pub fn train_affine(
    data: &dyn DataLaw,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let shape = data.shape();
    let steps = sched.steps();

    let mut init_rng = rng.substream(0);
    let mut m_hat = Image::zeros(shape);
    for _ in 0..cfg.init_samples {
        m_hat.add_scaled_in_place(&data.sample_x0(&mut init_rng), 1.0)?;
    }
    if cfg.init_samples > 0 {
        m_hat = m_hat.scaled(1.0 / cfg.init_samples as f64);
    }

    let mut model = AffineDenoiser::zeros(steps, m_hat);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut draw = rng.substream(1);
    let inv_b = 1.0 / cfg.batch_size as f64;
    let mut grad_a = vec![0.0; steps];
    let mut grad_b = vec![0.0; steps];
    let mut grad_m = vec![0.0; shape.len()];

    for iteration in 0..cfg.iterations {
        grad_a.iter_mut().for_each(|g| *g = 0.0);
        grad_b.iter_mut().for_each(|g| *g = 0.0);
        grad_m.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;

        for _ in 0..cfg.batch_size {
            let x0 = data.sample_x0(&mut draw);
            let t = 1 + draw.below(steps);
            let eps = gaussian_noise(shape, &mut draw);
            let ab = sched.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (a, b) = (model.a[t - 1], model.b[t - 1]);
            let (mut ga, mut gb) = (0.0, 0.0);
            for (((&x0v, &e), &m), gm) in x0
                .data()
                .iter()
                .zip(eps.data())
                .zip(model.m_hat.data())
                .zip(grad_m.iter_mut())
            {
                let xt = sa * x0v + sn * e;
                let r = a * xt + b * m - e;
                loss += r * r;
                ga += r * xt;
                gb += r * m;
                *gm += 2.0 * inv_b * b * r;
            }
            grad_a[t - 1] += 2.0 * inv_b * ga;
            grad_b[t - 1] += 2.0 * inv_b * gb;
        }
        loss *= inv_b;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { iteration, loss });
        }
        losses.push(loss);

        let lr = cfg.learning_rate;
        for (a, g) in model.a.iter_mut().zip(&grad_a) {
            *a -= lr * g;
        }
        for (b, g) in model.b.iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
        for (m, g) in model.m_hat.data_mut().iter_mut().zip(&grad_m) {
            *m -= lr * g;
        }
    }

    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(TrainOutcome {
        model,
        final_loss,
        losses,
    })
}
