use rand::Rng;

use super::layers::Linear;
use super::params::{Builder, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sinusoidal timestep encoding `[len(ts), dim]`: sines in the first half,
/// cosines in the second, frequencies `10000^(-2i/dim)`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width {dim} must be even")));
    }
    if ts.is_empty() {
        return Err(Error::InvalidArgument("no timesteps to embed".into()));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (t as f64) * 10000f64.powf(-2.0 * i as f64 / dim as f64));
        let args: Vec<f64> = freqs.collect();
        out.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
        out.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
    }
    Tensor::new(&[ts.len(), dim], out)
}

/// Encoding followed by `Linear(c, 4c) -> SiLU -> Linear(4c, 4c)`.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub dim: usize,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl TimeEmbed {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            lin1: Linear::build(&mut b.scope("lin1"), dim, out_dim)?,
            lin2: Linear::build(&mut b.scope("lin2"), out_dim, out_dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, ts: &[usize]) -> Result<Var> {
        let enc = f.graph.constant(timestep_embedding(ts, self.dim)?);
        let h = self.lin1.forward(f, enc)?;
        let h = f.graph.silu(h);
        self.lin2.forward(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep_is_sines_zero_cosines_one() {
        let e = timestep_embedding::<f64>(&[0], 8).unwrap();
        assert_eq!(e.data()[..4], [0.0; 4]);
        assert_eq!(e.data()[4..], [1.0; 4]);
    }

    #[test]
    fn rows_are_distinct_and_bounded() {
        let ts: Vec<usize> = (1..=1000).collect();
        let e = timestep_embedding::<f32>(&ts, 16).unwrap();
        assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let rows: Vec<&[f32]> = e.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "rows {i} and {j}");
            }
        }
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(timestep_embedding::<f32>(&[1], 7).is_err());
    }
}
