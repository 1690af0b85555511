//! Dense row-major tensors.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major array. Storage is shared and copy-on-write, so
/// cloning is cheap and values are immutable from the graph's viewpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Constructor for internal callers whose sizes are correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Converts element type (e.g. `f32` to `f64` for gradient checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; out_shape.len()];
        let src = self.data();
        let last = out_shape.len() - 1;
        let inner = out_shape[last];
        let inner_stride = perm_strides[last];
        loop {
            let base: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                out.push(src[base + j * inner_stride]);
            }
            // advance the multi-index over all but the innermost axis
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Ok(Self::from_parts(out_shape, out));
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }

    /// Element at a multi-index. Intended for tests and diagnostics.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let off: usize = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum();
        self.data[off]
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::invalid("permute", format!("{perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
