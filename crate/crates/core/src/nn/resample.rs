//! Spatial-only resolution changes; the frequency axis is never resampled.

use rand::Rng;

use super::conv::ConvKind;
use super::layers::{Conv, Init};
use super::params::{Builder, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stride-2 spatial convolution.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
}

impl Downsample {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, kind: ConvKind, channels: usize) -> Result<Self> {
        let conv = Conv::build(&mut b.scope("conv"), channels, channels, kind.kernel(), [1, 2, 2], Init::FanIn)?;
        Ok(Self { conv })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = f.graph.shape(x);
        if s.len() != 5 || s[3] % 2 != 0 || s[4] % 2 != 0 {
            return Err(Error::invalid("downsample", format!("needs even spatial dims, got {s:?}")));
        }
        self.conv.forward(f, x)
    }
}

/// Nearest-neighbour x2 then a spatial convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv,
}

impl Upsample {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, kind: ConvKind, channels: usize) -> Result<Self> {
        let conv = Conv::build(&mut b.scope("conv"), channels, channels, kind.kernel(), [1, 1, 1], Init::FanIn)?;
        Ok(Self { conv })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let up = f.graph.upsample_nearest2(x)?;
        self.conv.forward(f, up)
    }
}
