//! Binary PPM (P6) output, 8 bits per sample, `[-1, 1]` mapped to `[0, 255]`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Image, Shape};

fn quantize(v: f64) -> u8 {
    // NaN saturates to 0 under `as`
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// PPM bytes for `img`. Single-channel images are written as grey RGB.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let c = img.channels();
    if c != 1 && c != 3 {
        return Err(Error::Dimension(format!(
            "PPM needs 1 or 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.reserve(img.shape().pixels() * 3);
    for px in img.data().chunks(c) {
        if c == 1 {
            let q = quantize(px[0]);
            out.extend_from_slice(&[q, q, q]);
        } else {
            out.extend(px.iter().map(|v| quantize(*v)));
        }
    }
    Ok(out)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let bytes = encode_ppm(img)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 file with maxval 255 into a 3-channel image in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Parse(format!("ppm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let shape = Shape::new(h, w, 3)?;
    let raster = bytes
        .get(pos..pos + shape.len())
        .ok_or_else(|| bad("truncated raster"))?;
    Image::from_vec(
        shape,
        raster.iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
    )
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(bytes: &[u8]) -> &[u8] {
        let header = b"P6\n4 2\n255\n".len();
        &bytes[header..]
    }

    #[test]
    fn extremes_map_to_byte_range() {
        let s = Shape::new(2, 4, 3).unwrap();
        let lo = encode_ppm(&Image::filled(s, -1.0)).unwrap();
        assert!(payload(&lo).iter().all(|&b| b == 0));
        let hi = encode_ppm(&Image::filled(s, 1.0)).unwrap();
        assert!(payload(&hi).iter().all(|&b| b == 255));
        let clamped = encode_ppm(&Image::filled(s, 7.0)).unwrap();
        assert_eq!(clamped, hi);
        assert_eq!(payload(&lo).len(), 24);
    }

    #[test]
    fn round_trip_reproduces_quantized_values() {
        let s = Shape::new(3, 5, 3).unwrap();
        let img = Image::from_fn(s, |y, x, c| ((y * 7 + x * 3 + c) as f64 * 0.37).sin());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            let q = quantize(*a) as f64 / 127.5 - 1.0;
            assert_eq!(*b, q);
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        // re-encoding the decoded image is the identity on bytes
        let bytes = encode_ppm(&back).unwrap();
        assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn grey_images_are_replicated() {
        let s = Shape::new(1, 2, 1).unwrap();
        let img = Image::from_vec(s, vec![-1.0, 1.0]).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert_eq!(&b[b.len() - 6..], &[0, 0, 0, 255, 255, 255]);
        assert!(encode_ppm(&Image::zeros(Shape::new(1, 1, 2).unwrap())).is_err());
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00").is_err());
    }
}
