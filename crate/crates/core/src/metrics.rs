//! Quality proxies: reconstruction error and per-subband statistics with a
//! simple two-sample distance between them.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{SUBBANDS, SUBBAND_NAMES};

/// Peak-to-peak range of `[-1, 1]` data.
pub const PSNR_PEAK: f64 = 2.0;

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, PSNR_PEAK))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
    pub abs_mean: f64,
    /// Fraction of the total squared norm held by this subband.
    pub energy_share: f64,
}

/// Moments of each subband, pooled over batch, channels and positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SubbandStats {
    pub bands: [BandStats; SUBBANDS],
}

impl SubbandStats {
    pub fn band(&self, name: &str) -> Option<&BandStats> {
        SUBBAND_NAMES.iter().position(|n| *n == name).map(|i| &self.bands[i])
    }
}

impl fmt::Display for SubbandStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<4} {:>12} {:>12} {:>12} {:>12}", "band", "mean", "std", "abs_mean", "energy")?;
        for (name, b) in SUBBAND_NAMES.iter().zip(&self.bands) {
            writeln!(
                f,
                "{:<4} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                name, b.mean, b.std, b.abs_mean, b.energy_share
            )?;
        }
        Ok(())
    }
}

/// Statistics of a `[B, C, 4, h, w]` batch of wavelet stacks.
pub fn subband_stats<T: Scalar>(stacks: &Tensor<T>) -> Result<SubbandStats> {
    let s = stacks.shape();
    if s.len() != 5 || s[2] != SUBBANDS {
        return Err(Error::invalid("subband stats", format!("expected [B, C, 4, h, w], got {s:?}")));
    }
    let plane = s[3] * s[4];
    let count = (s[0] * s[1] * plane) as f64;
    let mut sum = [0.0f64; SUBBANDS];
    let mut sum_abs = [0.0f64; SUBBANDS];
    let mut sum_sq = [0.0f64; SUBBANDS];
    for (i, chunk) in stacks.data().chunks(plane).enumerate() {
        let b = i % SUBBANDS;
        for &v in chunk {
            let v = v.to_f64_lossy();
            sum[b] += v;
            sum_abs[b] += v.abs();
            sum_sq[b] += v * v;
        }
    }
    let total: f64 = sum_sq.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "subband statistics need finite, non-zero energy (got {total})"
        )));
    }
    let mut out = SubbandStats::default();
    for b in 0..SUBBANDS {
        let mean = sum[b] / count;
        let var = (sum_sq[b] / count - mean * mean).max(0.0);
        out.bands[b] = BandStats {
            mean,
            std: var.sqrt(),
            abs_mean: sum_abs[b] / count,
            energy_share: sum_sq[b] / total,
        };
    }
    Ok(out)
}

/// `sum_b |d mean| + |d std| + |d energy_share|`.
pub fn stats_distance(a: &SubbandStats, b: &SubbandStats) -> f64 {
    a.bands
        .iter()
        .zip(&b.bands)
        .map(|(x, y)| (x.mean - y.mean).abs() + (x.std - y.std).abs() + (x.energy_share - y.energy_share).abs())
        .sum()
}
