//! Procedural toy images with controllable frequency content.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Smooth Gaussian bumps at random positions and colours.
    Blobs,
    /// Blobs plus single-pixel horizontal or vertical stripes.
    Stripes,
    /// Blobs plus a single-pixel checkerboard.
    Checkers,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ToyKind::Blobs),
            "stripes" => Ok(ToyKind::Stripes),
            "checkers" => Ok(ToyKind::Checkers),
            _ => Err(Error::InvalidArgument(format!("unknown toy kind {s} (blobs, stripes, checkers)"))),
        }
    }
}

/// `n` images of `size x size`, fully determined by `seed`.
pub fn make_toy(kind: ToyKind, n: usize, size: usize, seed: u64) -> Result<Vec<RgbImage>> {
    if size < 8 || size % 2 != 0 {
        return Err(Error::InvalidArgument(format!("toy image size {size} must be even and >= 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| one_image(kind, size, &mut rng)).collect())
}

fn one_image(kind: ToyKind, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.45));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let centre = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
            let sigma = rng.random_range(s / 8.0..s / 4.0);
            let colour = std::array::from_fn(|_| rng.random_range(-0.2..0.5));
            (centre, sigma, colour)
        })
        .collect();
    let amplitude = rng.random_range(0.15..0.3);
    let vertical = rng.random_bool(0.5);
    let phase = rng.random_range(0..2usize);

    let mut data = Vec::with_capacity(3 * size * size);
    for y in 0..size {
        for x in 0..size {
            let texture = match kind {
                ToyKind::Blobs => 0.0,
                ToyKind::Stripes => {
                    let k = if vertical { x } else { y };
                    if (k + phase) % 2 == 0 { amplitude } else { -amplitude }
                }
                ToyKind::Checkers => {
                    if (x + y + phase) % 2 == 0 { amplitude } else { -amplitude }
                }
            };
            for c in 0..3 {
                let mut v = background[c] + texture;
                for (centre, sigma, colour) in &blobs {
                    let (dx, dy) = (x as f64 + 0.5 - centre[0], y as f64 + 0.5 - centre[1]);
                    v += colour[c] * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage::new(size, size, data).expect("dims match")
}
