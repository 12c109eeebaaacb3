use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Dense `height x width x channels` raster, row-major with interleaved
/// channels: element `(y, x, c)` lives at `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                shape.height,
                shape.width,
                shape.channels
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    /// `self + k * other`.
    pub fn add_scaled(&self, other: &Image, k: f64) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(Image {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + k * b)
                .collect(),
        })
    }

    pub fn add_scaled_in_place(&mut self, other: &Image, k: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.add_scaled(other, -1.0)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single channel `c` as its own one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let shape = Shape {
            channels: 1,
            ..self.shape
        };
        Image {
            shape,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.shape.channels)
                .copied()
                .collect(),
        }
    }
}

/// 2x2 box average. A trailing odd row or column is dropped.
pub fn avg_pool2(img: &Image) -> Result<Image> {
    let s = img.shape();
    if s.height < 2 || s.width < 2 {
        return Err(Error::Dimension(format!(
            "avg_pool2 needs at least 2x2, got {}x{}",
            s.height, s.width
        )));
    }
    let out_shape = Shape {
        height: s.height / 2,
        width: s.width / 2,
        channels: s.channels,
    };
    let mut out = Image::zeros(out_shape);
    for y in 0..out_shape.height {
        for x in 0..out_shape.width {
            for c in 0..s.channels {
                let sum = img.get(2 * y, 2 * x, c)
                    + img.get(2 * y, 2 * x + 1, c)
                    + img.get(2 * y + 1, 2 * x, c)
                    + img.get(2 * y + 1, 2 * x + 1, c);
                out.set(y, x, c, 0.25 * sum);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool2`]: spreads each output gradient over its 2x2
/// source block; dropped rows/columns receive zero.
pub fn avg_pool2_backward(input_shape: Shape, grad_out: &Image) -> Image {
    let mut g = Image::zeros(input_shape);
    let go = grad_out.shape();
    for y in 0..go.height {
        for x in 0..go.width {
            for c in 0..go.channels {
                let v = 0.25 * grad_out.get(y, x, c);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = g.index(2 * y + dy, 2 * x + dx, c);
                    g.data[i] += v;
                }
            }
        }
    }
    g
}

/// Stacks identity, forward horizontal difference and forward vertical
/// difference channels: output channel `c` is the input, `C + c` is
/// `x[y, x+1] - x[y, x]`, `2C + c` is `x[y+1, x] - x[y, x]`. Differences
/// past the last column/row are zero.
pub fn diff_channels(img: &Image) -> Image {
    let s = img.shape();
    let cin = s.channels;
    let out_shape = Shape {
        channels: 3 * cin,
        ..s
    };
    let mut out = Image::zeros(out_shape);
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..cin {
                let v = img.get(y, x, c);
                out.set(y, x, c, v);
                if x + 1 < s.width {
                    out.set(y, x, cin + c, img.get(y, x + 1, c) - v);
                }
                if y + 1 < s.height {
                    out.set(y, x, 2 * cin + c, img.get(y + 1, x, c) - v);
                }
            }
        }
    }
    out
}

/// Adjoint of [`diff_channels`].
pub fn diff_channels_backward(input_shape: Shape, grad_out: &Image) -> Image {
    let s = input_shape;
    let cin = s.channels;
    let mut g = Image::zeros(s);
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..cin {
                let here = g.index(y, x, c);
                g.data[here] += grad_out.get(y, x, c);
                if x + 1 < s.width {
                    let gh = grad_out.get(y, x, cin + c);
                    g.data[here] -= gh;
                    let right = g.index(y, x + 1, c);
                    g.data[right] += gh;
                }
                if y + 1 < s.height {
                    let gv = grad_out.get(y, x, 2 * cin + c);
                    g.data[here] -= gv;
                    let below = g.index(y + 1, x, c);
                    g.data[below] += gv;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, vals: &[f64]) -> Image {
        Image::from_vec(Shape::new(h, w, 1).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(Shape::new(0, 3, 3), Err(Error::Dimension(_))));
        assert!(matches!(Shape::new(3, 3, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn from_vec_checks_length() {
        let s = Shape::new(2, 2, 3).unwrap();
        assert!(Image::from_vec(s, vec![0.0; 11]).is_err());
    }

    #[test]
    fn pool_single_block() {
        let p = avg_pool2(&gray(2, 2, &[0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn pool_constant() {
        let img = Image::filled(Shape::new(6, 4, 3).unwrap(), 0.3);
        let p = avg_pool2(&img).unwrap();
        assert_eq!(p.shape(), Shape::new(3, 2, 3).unwrap());
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn pool_ramp() {
        let vals: Vec<f64> = (0..16).map(f64::from).collect();
        let p = avg_pool2(&gray(4, 4, &vals)).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn pool_drops_odd_edge() {
        let vals: Vec<f64> = (0..15).map(f64::from).collect();
        let p = avg_pool2(&gray(3, 5, &vals)).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 2, 1).unwrap());
        // rows 0-1, cols 0-1: 0,1,5,6
        assert_eq!(p.data(), &[3.0, 5.0]);
    }

    #[test]
    fn pool_too_small() {
        assert!(matches!(
            avg_pool2(&gray(1, 4, &[0.0; 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn diff_constant() {
        let img = Image::filled(Shape::new(3, 3, 2).unwrap(), 0.7);
        let d = diff_channels(&img);
        assert_eq!(d.channels(), 6);
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..2 {
                    assert_eq!(d.get(y, x, c), 0.7);
                    assert_eq!(d.get(y, x, 2 + c), 0.0);
                    assert_eq!(d.get(y, x, 4 + c), 0.0);
                }
            }
        }
    }

    #[test]
    fn diff_two_by_two() {
        let d = diff_channels(&gray(2, 2, &[0.0, 1.0, 0.0, 1.0]));
        let horiz: Vec<f64> = (0..4).map(|p| d.data()[p * 3 + 1]).collect();
        assert_eq!(horiz, vec![1.0, 0.0, 1.0, 0.0]);
        let vert: Vec<f64> = (0..4).map(|p| d.data()[p * 3 + 2]).collect();
        assert_eq!(vert, vec![0.0; 4]);
    }

    #[test]
    fn step_edge_across_columns_has_no_vertical_difference() {
        let img = Image::from_fn(
            Shape::new(4, 6, 3).unwrap(),
            |_, x, _| {
                if x < 3 {
                    -1.0
                } else {
                    1.0
                }
            },
        );
        let d = diff_channels(&img);
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(d.get(y, x, 6 + c), 0.0);
                }
            }
        }
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..5, 1usize..5, 1usize..3).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(-2.0f64..2.0, 4 * h * w * c).prop_map(move |v| {
                Image::from_vec(Shape::new(2 * h, 2 * w, c).unwrap(), v).unwrap()
            })
        })
    }

    fn dot(a: &Image, b: &Image) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn pool_preserves_mean_on_even_dims(img in arb_image()) {
            let p = avg_pool2(&img).unwrap();
            prop_assert!((p.mean() - img.mean()).abs() < 1e-12);
        }

        #[test]
        fn diff_identity_sum_matches_input(img in arb_image()) {
            let d = diff_channels(&img);
            let c = img.channels();
            let id_sum: f64 = (0..img.shape().pixels())
                .flat_map(|p| (0..c).map(move |k| p * 3 * c + k))
                .map(|i| d.data()[i])
                .sum();
            prop_assert!((id_sum - img.data().iter().sum::<f64>()).abs() < 1e-10);
        }

        #[test]
        fn backward_ops_are_adjoints(img in arb_image(), seed in 0u64..1000) {
            let mut rng = crate::numerics::RngStream::new(seed, 0);
            let d = diff_channels(&img);
            let gd = crate::numerics::gaussian_noise(d.shape(), &mut rng);
            let lhs = dot(&d, &gd);
            let rhs = dot(&img, &diff_channels_backward(img.shape(), &gd));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));

            let p = avg_pool2(&img).unwrap();
            let gp = crate::numerics::gaussian_noise(p.shape(), &mut rng);
            let lhs = dot(&p, &gp);
            let rhs = dot(&img, &avg_pool2_backward(img.shape(), &gp));
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
