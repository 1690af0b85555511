use rand::Rng;

use super::conv::{ConvKind, ConvStage};
use super::layers::{Conv, Init, Linear};
use super::params::{Builder, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Residual block: stage -> + time projection -> (dropout) stage, plus a
/// pointwise skip projection when the channel count changes. The second
/// stage's last conv starts at zero, so the block starts as its skip path.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub in_stage: ConvStage,
    pub emb_proj: Linear,
    pub out_stage: ConvStage,
    pub skip: Option<Conv>,
    pub dropout: f64,
}

impl ResBlock {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let in_stage = ConvStage::build(&mut b.scope("in"), kind, c_in, c_out, false)?;
        let emb_proj = Linear::build(&mut b.scope("emb"), emb_dim, c_out)?;
        let out_stage = ConvStage::build(&mut b.scope("out"), kind, c_out, c_out, true)?;
        let skip = if c_in != c_out {
            Some(Conv::build(&mut b.scope("skip"), c_in, c_out, [1, 1, 1], [1, 1, 1], Init::FanIn)?)
        } else {
            None
        };
        Ok(Self {
            c_in,
            c_out,
            in_stage,
            emb_proj,
            out_stage,
            skip,
            dropout,
        })
    }

    /// `x[B, c_in, F, H, W]`, `emb[B, emb_dim]`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let s = f.graph.shape(x);
        if s.len() != 5 || s[1] != self.c_in {
            return Err(Error::invalid(
                "resblock",
                format!("expected [B, {}, F, H, W], got {s:?}", self.c_in),
            ));
        }
        let h = self.in_stage.forward(f, x, 0.0)?;
        let e = f.graph.silu(emb);
        let e = self.emb_proj.forward(f, e)?;
        let h = f.graph.add_channel(h, e)?;
        let h = self.out_stage.forward(f, h, self.dropout)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(f, x)?,
            None => x,
        };
        f.graph.add(skip, h)
    }
}
