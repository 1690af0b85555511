//! Pre-activated convolution stages over the 5D spatial-frequency layout.
//!
//! A (2+1)D spatial-frequency stage factors a `f x k x k` 3D convolution into
//! `M` spatial filters of size `N_in x 1 x k x k` followed by `N_out`
//! frequency filters of size `M x f x 1 x 1`, with `M` chosen so that the
//! parameter count tracks the full 3D filter bank.

use rand::Rng;

use super::layers::{Conv, GroupNorm, Init};
use super::params::{Builder, Forward};
use crate::autodiff::Var;
use crate::error::Result;
use crate::scalar::Scalar;

pub const SPATIAL_KERNEL: usize = 3;
pub const FREQ_KERNEL: usize = 3;

/// Intermediate channel count for the factored convolution:
/// `floor(N_in N_out f k^2 / (N_in k^2 + f N_out))`.
pub fn midplanes(n_in: usize, n_out: usize, f: usize, k: usize) -> usize {
    (n_in * n_out * f * k * k) / (n_in * k * k + f * n_out)
}

/// Weight count of the factored pair (biases excluded).
pub fn factored_weights(n_in: usize, n_out: usize, f: usize, k: usize) -> usize {
    let m = midplanes(n_in, n_out, f, k);
    n_in * k * k * m + m * f * n_out
}

/// Weight count of the full `f x k x k` 3D filter bank.
pub fn full3d_weights(n_in: usize, n_out: usize, f: usize, k: usize) -> usize {
    n_in * n_out * f * k * k
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// `(1, 3, 3)` kernels: 2D per frequency slice.
    Spatial,
    /// (2+1)D factorization: `(1, 3, 3)` then `(3, 1, 1)`.
    SpatFreq,
    /// Full `(3, 3, 3)` kernels.
    Full3d,
}

impl ConvKind {
    /// Kernel of a single-conv stage (and of resampling/in/out convs).
    pub fn kernel(self) -> [usize; 3] {
        match self {
            ConvKind::Full3d => [FREQ_KERNEL, SPATIAL_KERNEL, SPATIAL_KERNEL],
            ConvKind::Spatial | ConvKind::SpatFreq => [1, SPATIAL_KERNEL, SPATIAL_KERNEL],
        }
    }
}

/// GroupNorm -> SiLU -> conv, or for `SpatFreq` the two-factor sequence
/// GroupNorm -> SiLU -> spatial conv -> GroupNorm -> SiLU -> frequency conv.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub kind: ConvKind,
    pub norm: GroupNorm,
    pub conv: Conv,
    /// Second factor of a spatial-frequency stage.
    pub freq: Option<(GroupNorm, Conv)>,
    /// When false the norm/SiLU pre-activations are skipped (tests only).
    pub pre_activation: bool,
}

impl ConvStage {
    /// `zero_last` zero-initializes the final convolution of the stage.
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        zero_last: bool,
    ) -> Result<Self> {
        let last_init = if zero_last { Init::Zero } else { Init::FanIn };
        let norm = GroupNorm::build(&mut b.scope("norm"), c_in)?;
        match kind {
            ConvKind::Spatial | ConvKind::Full3d => {
                let conv = Conv::build(&mut b.scope("conv"), c_in, c_out, kind.kernel(), [1, 1, 1], last_init)?;
                Ok(Self {
                    kind,
                    norm,
                    conv,
                    freq: None,
                    pre_activation: true,
                })
            }
            ConvKind::SpatFreq => {
                let m = midplanes(c_in, c_out, FREQ_KERNEL, SPATIAL_KERNEL);
                let spatial = Conv::build(
                    &mut b.scope("spatial"),
                    c_in,
                    m,
                    [1, SPATIAL_KERNEL, SPATIAL_KERNEL],
                    [1, 1, 1],
                    Init::FanIn,
                )?;
                let mid_norm = GroupNorm::build(&mut b.scope("mid_norm"), m)?;
                let freq = Conv::build(&mut b.scope("freq"), m, c_out, [FREQ_KERNEL, 1, 1], [1, 1, 1], last_init)?;
                Ok(Self {
                    kind,
                    norm,
                    conv: spatial,
                    freq: Some((mid_norm, freq)),
                    pre_activation: true,
                })
            }
        }
    }

    fn activate<T: Scalar>(&self, f: &mut Forward<'_, T>, norm: &GroupNorm, x: Var) -> Result<Var> {
        if !self.pre_activation {
            return Ok(x);
        }
        let h = norm.forward(f, x)?;
        Ok(f.graph.silu(h))
    }

    /// `dropout` is applied right after the first activation.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.activate(f, &self.norm, x)?;
        let h = f.dropout(h, dropout)?;
        let h = self.conv.forward(f, h)?;
        match &self.freq {
            None => Ok(h),
            Some((mid_norm, freq)) => {
                let h = self.activate(f, mid_norm, h)?;
                freq.forward(f, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midplanes_examples() {
        assert_eq!(midplanes(64, 64, 3, 3), 144);
        assert_eq!(factored_weights(64, 64, 3, 3), 110_592);
        assert_eq!(full3d_weights(64, 64, 3, 3), 110_592);

        assert_eq!(midplanes(3, 16, 3, 3), 17);
        assert_eq!(factored_weights(3, 16, 3, 3), 459 + 816);
        assert!(factored_weights(3, 16, 3, 3) <= 1296);

        for n in (2..200).step_by(2) {
            assert_eq!(midplanes(n, n, 1, 1), n / 2);
        }
    }
}
