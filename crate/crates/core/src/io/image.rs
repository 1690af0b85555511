//! 8-bit RGB images and the binary PPM (P6) codec.
//!
//! Pixels map to model space by `x / 127.5 - 1` and back by clamping to
//! `[-1, 1]` then rounding `(x + 1) * 127.5`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `RGBRGB...`, row-major.
    pub data: Vec<u8>,
}

pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn quantize(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` in `[-1, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::from_f64_lossy(normalize(px[c]));
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("image dims are positive")
    }

    /// From `[3, H, W]` (or `[1, 3, H, W]`) values in `[-1, 1]`; values
    /// outside are clamped.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(Error::invalid("image", format!("expected [3, H, W], got {s:?}"))),
        };
        let plane = h * w;
        let d = t.data();
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                data.push(quantize(d[c * plane + i].to_f64_lossy()));
            }
        }
        Self::new(w, h, data)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos);
        if magic != b"P6" {
            return Err(Error::format(path, "not a binary PPM (P6) file"));
        }
        for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
            let tok = next_token(bytes, &mut pos);
            fields[i] = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::format(path, format!("bad PPM {name}")))?;
        }
        let [w, h, maxval] = fields;
        if maxval != 255 {
            return Err(Error::format(path, format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = 3 * w * h;
        if bytes.len() < pos + need {
            return Err(Error::format(path, format!("raster truncated: {} of {need} bytes", bytes.len().saturating_sub(pos))));
        }
        Self::new(w, h, bytes[pos..pos + need].to_vec())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::decode_ppm(&super::read_file(path)?, path)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, &self.encode_ppm())
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> &'a [u8] {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    &bytes[start..*pos]
}

/// Stacks equally sized images into `[N, 3, H, W]`.
pub fn batch_tensor<T: Scalar>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.width, img.height) != (first.width, first.height) {
            return Err(Error::InvalidArgument("images differ in size".into()));
        }
        data.extend_from_slice(img.to_tensor::<T>().data());
    }
    Tensor::new(&[images.len(), 3, first.height, first.width], data)
}

/// Splits `[N, 3, H, W]` into images.
pub fn images_from_batch<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<RgbImage>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid("images", format!("expected [N, 3, H, W], got {s:?}")));
    }
    let per = batch.numel() / s[0];
    (0..s[0])
        .map(|n| {
            let one = Tensor::new(&[3, s[2], s[3]], batch.data()[n * per..(n + 1) * per].to_vec())?;
            RgbImage::from_tensor(&one)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(255), 1.0);
        assert_eq!(normalize(0), -1.0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(0.0), 128);
        for v in 0..=255u8 {
            assert_eq!(quantize(normalize(v)), v);
        }
    }

    #[test]
    fn ppm_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (7, 5);
        let data: Vec<u8> = (0..3 * w * h).map(|_| rng.random()).collect();
        let img = RgbImage::new(w, h, data).unwrap();
        let bytes = img.encode_ppm();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(RgbImage::decode_ppm(&bytes, Path::new("x")).unwrap(), img);
        let back = RgbImage::from_tensor(&img.to_tensor::<f32>()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6 # made by hand\n2 1\n# maxval next\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = RgbImage::decode_ppm(&bytes, Path::new("x")).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);

        let p = Path::new("bad.ppm");
        assert!(RgbImage::decode_ppm(b"P3\n1 1\n255\n", p).is_err());
        assert!(RgbImage::decode_ppm(b"P6\n1 1\n65535\n", p).is_err());
        let err = RgbImage::decode_ppm(b"P6\n2 2\n255\n\x01\x02", p).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"), "{err}");
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = RgbImage::new(2, 1, vec![255, 0, 0, 0, 255, 0]).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), [3, 1, 2]);
        assert_eq!(t.data(), [1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let batch = batch_tensor::<f64>(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(batch.shape(), [2, 3, 1, 2]);
        assert_eq!(images_from_batch(&batch).unwrap(), vec![img.clone(), img]);
    }
}
