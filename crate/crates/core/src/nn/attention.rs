//! Multi-head QKV self-attention over chosen axes of `[B, N, F, H, W]`.
//!
//! The block permutes its input so the attended axis becomes the sequence
//! axis of a `[B', N, L]` tensor and everything else folds into `B'`:
//!
//! * spatial:   `[B*F, N, H*W]`
//! * frequency: `[B*H*W, N, F]`
//! * all:       `[B, N, F*H*W]`
//!
//! Normalization happens after the fold, so folded positions never share
//! statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{GroupNorm, Init, Pointwise};
use super::params::{Builder, Forward};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    Spatial,
    Frequency,
    All,
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub mode: AttnMode,
    pub channels: usize,
    pub heads: usize,
    pub norm: GroupNorm,
    pub qkv: Pointwise,
    pub proj_out: Pointwise,
}

impl AttentionBlock {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        mode: AttnMode,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            mode,
            channels,
            heads,
            norm: GroupNorm::build(&mut b.scope("norm"), channels)?,
            qkv: Pointwise::build(&mut b.scope("qkv"), channels, 3 * channels, Init::FanIn)?,
            proj_out: Pointwise::build(&mut b.scope("proj_out"), channels, channels, Init::Zero)?,
        })
    }

    /// Permutation taking `[B, N, F, H, W]` to `[B', N, L]` order.
    fn fold_perm(&self) -> [usize; 5] {
        match self.mode {
            AttnMode::Spatial => [0, 2, 1, 3, 4],
            AttnMode::Frequency => [0, 3, 4, 1, 2],
            AttnMode::All => [0, 1, 2, 3, 4],
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = f.graph.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::invalid(
                "attention",
                format!("expected [B, {}, F, H, W], got {s:?}", self.channels),
            ));
        }
        let (b, n, fr, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (batch, len) = match self.mode {
            AttnMode::Spatial => (b * fr, h * w),
            AttnMode::Frequency => (b * h * w, fr),
            AttnMode::All => (b, fr * h * w),
        };
        let perm = self.fold_perm();
        let permuted = if self.mode == AttnMode::All { x } else { f.graph.permute(x, &perm)? };
        let permuted_shape = f.graph.shape(permuted).to_vec();
        let seq = f.graph.reshape(permuted, &[batch, n, len])?;

        let normed = self.norm.forward(f, seq)?;
        let qkv = self.qkv.forward(f, normed)?;
        let attended = qkv_attention(&mut f.graph, qkv, self.heads)?;
        let proj = self.proj_out.forward(f, attended)?;
        let out = f.graph.add(seq, proj)?;

        let out = f.graph.reshape(out, &permuted_shape)?;
        if self.mode == AttnMode::All {
            return Ok(out);
        }
        let inv = crate::tensor::inverse_perm(&perm);
        f.graph.permute(out, &inv)
    }
}

/// Scaled dot-product attention on `qkv[B', 3N, L]` with the head split
/// applied to the packed tensor: head `h` owns channels `[3dh, 3d(h+1))`,
/// which split into `q, k, v` of `d = N / heads` channels each. Both `q`
/// and `k` are scaled by `d^(-1/4)`.
pub fn qkv_attention<T: Scalar>(g: &mut Graph<T>, qkv: Var, heads: usize) -> Result<Var> {
    let s = g.shape(qkv).to_vec();
    if s.len() != 3 || s[1] % (3 * heads) != 0 {
        return Err(Error::invalid("qkv_attention", format!("{s:?} with {heads} heads")));
    }
    let (batch, width, len) = (s[0], s[1], s[2]);
    let d = width / (3 * heads);
    let per_head = g.reshape(qkv, &[batch * heads, 3 * d, len])?;
    let parts = g.split(per_head, 1, &[d, d, d])?;
    let scale = 1.0 / (d as f64).sqrt().sqrt();
    let q = g.mul_scalar(parts[0], scale);
    let k = g.mul_scalar(parts[1], scale);
    // weight[b, t, s] = sum_c q[b, c, t] k[b, c, s]
    let qt = g.permute(q, &[0, 2, 1])?;
    let logits = g.matmul(qt, k)?;
    let weight = g.softmax(logits, 2)?;
    // out[b, c, t] = sum_s weight[b, t, s] v[b, c, s]
    let wt = g.permute(weight, &[0, 2, 1])?;
    let out = g.matmul(parts[2], wt)?;
    g.reshape(out, &[batch, heads * d, len])
}
