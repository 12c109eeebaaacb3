//! Procedural style references and data-law means.
//!
//! A template is named `kind` or `kind:period`, e.g. `checker:4`. Colours
//! come from a two-colour palette drawn from the seed, so the same name and
//! seed always give the same image. Values stay inside [-0.9, 0.9].

use crate::denoisers::GmmData;
use crate::error::{Error, Result};
use crate::numerics::{Image, RngStream, Shape};

pub const TEMPLATE_KINDS: &[&str] = &[
    "stripes-h",
    "stripes-v",
    "checker",
    "radial",
    "noise",
    "smooth",
];

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTemplate {
    pub kind: String,
    pub period: usize,
}

impl StyleTemplate {
    pub fn parse(name: &str) -> Result<Self> {
        let (kind, period) = match name.split_once(':') {
            Some((k, p)) => {
                let p: usize = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad template period in {name:?}")))?;
                (k, p)
            }
            None => (name, default_period(name)),
        };
        if !TEMPLATE_KINDS.contains(&kind) {
            return Err(Error::Config(format!(
                "unknown template {kind:?}; expected one of {}",
                TEMPLATE_KINDS.join(", ")
            )));
        }
        if period == 0 {
            return Err(Error::Config("template period must be positive".into()));
        }
        Ok(Self {
            kind: kind.to_string(),
            period,
        })
    }

    pub fn render(&self, shape: Shape, seed: u64) -> Image {
        let mut rng = RngStream::new(seed, name_tag(&self.kind));
        let c = shape.channels;
        let a: Vec<f64> = (0..c).map(|_| 1.8 * rng.uniform() - 0.9).collect();
        let mut b: Vec<f64> = (0..c).map(|_| 1.8 * rng.uniform() - 0.9).collect();
        // keep the two colours visibly apart
        let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / c as f64;
        if gap < 0.6 {
            b = a
                .iter()
                .map(|x| {
                    if *x > 0.0 {
                        (x - 1.0).max(-0.9)
                    } else {
                        (x + 1.0).min(0.9)
                    }
                })
                .collect();
        }
        let p = self.period as f64;
        let (h, w) = (shape.height as f64, shape.width as f64);
        let cells: Vec<f64> = if self.kind == "noise" {
            let bh = shape.height.div_ceil(self.period);
            let bw = shape.width.div_ceil(self.period);
            (0..bh * bw).map(|_| rng.uniform()).collect()
        } else {
            Vec::new()
        };
        Image::from_fn(shape, |y, x, ch| {
            let u = match self.kind.as_str() {
                "stripes-h" => ((y / self.period) % 2) as f64,
                "stripes-v" => ((x / self.period) % 2) as f64,
                "checker" => ((y / self.period + x / self.period) % 2) as f64,
                "radial" => {
                    let dy = y as f64 + 0.5 - h / 2.0;
                    let dx = x as f64 + 0.5 - w / 2.0;
                    0.5 + 0.5 * ((dy * dy + dx * dx).sqrt() * std::f64::consts::PI / p).cos()
                }
                "noise" => {
                    let bw = shape.width.div_ceil(self.period);
                    cells[(y / self.period) * bw + x / self.period]
                }
                _ => (x + y) as f64 / ((h + w - 2.0).max(1.0)),
            };
            a[ch] * (1.0 - u) + b[ch] * u
        })
    }
}

fn default_period(kind: &str) -> usize {
    match kind {
        "radial" => 3,
        "noise" => 2,
        _ => 2,
    }
}

fn name_tag(kind: &str) -> u64 {
    // FNV-1a, stable across platforms
    kind.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn render_template(name: &str, shape: Shape, seed: u64) -> Result<Image> {
    Ok(StyleTemplate::parse(name)?.render(shape, seed))
}

/// A mixture whose components are four stylistically distinct templates,
/// so unguided batches span several styles.
pub fn style_population(shape: Shape, seed: u64, sigma: f64) -> Result<GmmData> {
    let means = ["stripes-h", "stripes-v", "checker", "radial"]
        .iter()
        .enumerate()
        .map(|(k, name)| render_template(name, shape, seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    GmmData::uniform(means, sigma)
}
