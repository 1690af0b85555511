//! Primitive parameterized layers.

use rand::Rng;

use super::params::{Builder, Forward, ParamId};
use crate::autodiff::Var;
use crate::error::Result;
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const MAX_NORM_GROUPS: usize = 32;

/// Largest divisor of `channels` not exceeding 32.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.ones("weight", &[channels])?,
            bias: b.zeros("bias", &[channels])?,
            groups: norm_groups(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.group_norm(x, w, b, self.groups, NORM_EPS)
    }
}

/// How a conv weight is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

/// A 3D convolution over `[B, C, F, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        init: Init,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let fan_in = c_in * kernel.iter().product::<usize>();
        let (weight, bias) = match init {
            Init::FanIn => (
                b.fan_in_uniform("weight", &shape, fan_in)?,
                b.fan_in_uniform("bias", &[c_out], fan_in)?,
            ),
            Init::Zero => (b.zeros("weight", &shape)?, b.zeros("bias", &[c_out])?),
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel.map(|k| (k - 1) / 2),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.conv3d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Pointwise channel projection over `[B, C, L]` (a kernel-1 conv1d).
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Result<Self> {
        let (weight, bias) = match init {
            Init::FanIn => (
                b.fan_in_uniform("weight", &[c_out, c_in, 1], c_in)?,
                b.fan_in_uniform("bias", &[c_out], c_in)?,
            ),
            Init::Zero => (b.zeros("weight", &[c_out, c_in, 1])?, b.zeros("bias", &[c_out])?),
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.conv1d(x, w, Some(b), 1, 0)
    }
}

/// Fully connected `[B, in] -> [B, out]`; the weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.fan_in_uniform("weight", &[d_in, d_out], d_in)?,
            bias: b.fan_in_uniform("bias", &[d_out], d_in)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let batch = f.graph.shape(x)[0];
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let x3 = f.graph.reshape(x, &[1, batch, self.d_in])?;
        let w3 = f.graph.reshape(w, &[1, self.d_in, self.d_out])?;
        let y = f.graph.matmul(x3, w3)?;
        let y = f.graph.reshape(y, &[batch, self.d_out])?;
        f.graph.add_channel(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(3), 3);
        assert_eq!(norm_groups(16), 16);
        assert_eq!(norm_groups(64), 32);
        assert_eq!(norm_groups(108), 27);
        assert_eq!(norm_groups(864), 32);
        assert_eq!(norm_groups(17), 17);
        assert_eq!(norm_groups(37), 1);
    }
}
