use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::image::{Image, Shape};

/// A deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose output is a pure function of key, stream and
/// word position, so the same identity yields the same draws on every
/// platform. Sub-streams are derived by hashing tags into the stream id and
/// never share state with their parent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream keyed by this stream's identity and `tag`. Independent
    /// of how many values have already been drawn from `self`.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_id, tag))
    }

    /// Shorthand for nested `substream` calls.
    pub fn substream_path(&self, tags: &[u64]) -> RngStream {
        let id = tags.iter().fold(self.stream_id, |id, &tag| mix(id, tag));
        RngStream::new(self.seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

// splitmix64 finalizer over the pair
fn mix(stream_id: u64, tag: u64) -> u64 {
    let mut z = stream_id
        .rotate_left(17)
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Image of i.i.d. standard normal entries drawn from `rng`.
pub fn gaussian_noise(shape: Shape, rng: &mut RngStream) -> Image {
    let data = (0..shape.len()).map(|_| rng.normal()).collect();
    Image::from_vec(shape, data).expect("shape length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_identity_same_draws() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 4);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_ignores_parent_position() {
        let mut a = RngStream::new(1, 0);
        let before = a.substream(9).next_u64();
        for _ in 0..10 {
            a.next_u64();
        }
        assert_eq!(before, a.substream(9).next_u64());
        assert_ne!(a.substream(9).stream_id(), a.substream(10).stream_id());
    }

    #[test]
    fn substream_path_is_nested_substreams() {
        let r = RngStream::new(5, 11);
        assert_eq!(
            r.substream_path(&[1, 2]).stream_id(),
            r.substream(1).substream(2).stream_id()
        );
    }

    #[test]
    fn noise_moments_over_a_million_draws() {
        let mut rng = RngStream::new(2024, 0);
        let img = gaussian_noise(Shape::new(1000, 1000, 1).unwrap(), &mut rng);
        let n = img.len() as f64;
        let mean = img.data().iter().sum::<f64>() / n;
        let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn noise_is_deterministic() {
        let shape = Shape::new(4, 5, 3).unwrap();
        let a = gaussian_noise(shape, &mut RngStream::new(42, 1));
        let b = gaussian_noise(shape, &mut RngStream::new(42, 1));
        assert_eq!(a, b);
    }

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 via erf, accurate to ~1e-7
        let z = x / std::f64::consts::SQRT_2;
        let s = z.signum();
        let z = z.abs();
        let t = 1.0 / (1.0 + 0.327_591_1 * z);
        let poly = t
            * (0.254_829_592
                + t * (-0.284_496_736
                    + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        let erf = 1.0 - poly * (-z * z).exp();
        0.5 * (1.0 + s * erf)
    }

    #[test]
    fn noise_passes_chi_square_goodness_of_fit() {
        // 20 equiprobable bins under N(0,1); 19 dof critical value at p=0.001 is 43.82
        let n = 100_000;
        let img = gaussian_noise(Shape::new(n, 1, 1).unwrap(), &mut RngStream::new(99, 5));
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for &v in img.data() {
            let u = normal_cdf(v);
            let b = ((u * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }
}
