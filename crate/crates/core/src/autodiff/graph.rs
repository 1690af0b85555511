//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so a node's parents always precede
//! it and the tape order is a topological order. `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products.

use rand::Rng;

use super::kernels::{self, ConvGeom, GroupNormStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{inverse_perm, Tensor};
use crate::wavelet;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    /// `x[B, C, ...] + b[C]` or `+ b[B, C]`.
    AddChannel { x: Var, b: Var, per_batch: bool },
    Matmul(Var, Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Sqrt(Var),
    Exp(Var),
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    Upsample2(Var),
    AvgPool2(Var),
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, indices: Vec<usize> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Haar { x: Var, inverse: bool },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The recorded operation tape plus gradient buffers.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// A graph that evaluates ops without retaining anything for backward.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parent handles of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::AddChannel { x, b, .. } => vec![*x, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::SumAll(x)
            | Op::Sqrt(x)
            | Op::Exp(x)
            | Op::Silu(x)
            | Op::Upsample2(x)
            | Op::AvgPool2(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Dropout { x, .. }
            | Op::Haar { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    ///
    /// Leaves that require grad but were not reached get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.backward_done = false;
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let f = match op {
            BinaryOp::Add => |x: T, y: T| x + y,
            BinaryOp::Sub => |x: T, y: T| x - y,
            BinaryOp::Mul => |x: T, y: T| x * y,
            BinaryOp::Div => |x: T, y: T| x / y,
        };
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(a).map(|x| x + s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let value = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    /// Adds `b` (shape `[C]` or `[B, C]`) along axis 1 of `x` (`[B, C, ...]`).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let per_batch = match bs.as_slice() {
            [c] if xs.len() >= 2 && *c == xs[1] => false,
            [n, c] if xs.len() >= 2 && *n == xs[0] && *c == xs[1] => true,
            _ => return Err(Error::shape("add_channel", &xs, &bs)),
        };
        let (batch, ch) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut out = self.data(x).to_vec();
        let bd = self.data(b);
        for n in 0..batch {
            for c in 0..ch {
                let bv = if per_batch { bd[n * ch + c] } else { bd[c] };
                let off = (n * ch + c) * inner;
                out[off..off + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddChannel { x, b, per_batch }, rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sqrt());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sqrt(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[B, M, K] @ [B, K, N] -> [B, M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = kernels::bmm(self.data(a), self.data(b), bt, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::Matmul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let y = kernels::softmax(self.data(x), o, l, i);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { x, axis }, rg))
    }

    // ---- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x)),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed; rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    // ---- neural-network ops ------------------------------------------

    /// Group normalization of `x[B, C, ...]` with affine `gamma[C]`, `beta[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("group_norm", format!("rank of {shape:?} < 2")));
        }
        let (batch, ch) = (shape[0], shape[1]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::invalid("group_norm", format!("{ch} channels into {groups} groups")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(Error::shape("group_norm", &[ch], self.shape(p)));
            }
        }
        let spatial = shape[2..].iter().product();
        let (y, stats) = kernels::group_norm(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            batch,
            ch,
            spatial,
            groups,
            eps,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// Nearest-neighbour x2 upsampling of the last two axes.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("upsample", format!("rank of {shape:?} < 2")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] *= 2;
        out_shape[r - 1] *= 2;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Upsample2(x), rg))
    }

    /// 2x2 average pooling of the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] % 2 != 0 || shape[r - 1] % 2 != 0 {
            return Err(Error::invalid("avg_pool2", format!("needs even spatial dims, got {shape:?}")));
        }
        let (h, w) = (shape[r - 2] / 2, shape[r - 1] / 2);
        let planes: usize = shape[..r - 2].iter().product();
        let src = self.data(x);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    let at = |di: usize, dj: usize| src[(p * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj];
                    out[(p * h + i) * w + j] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = h;
        out_shape[r - 1] = w;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::AvgPool2(x), rg))
    }

    /// Train-mode dropout: keeps each entry with probability `1 - p` and
    /// scales kept entries by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Row gather from `table[V, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", format!("table shape {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!("embedding index {bad} >= {rows}")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("embedding", "no indices"));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), dim], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// 3D cross-correlation: `x[B, Cin, D, H, W]`, `w[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::shape("conv", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv bias", &[ws[0]], self.shape(b)));
            }
        }
        let geom = ConvGeom::new(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            padding,
        )
        .ok_or_else(|| {
            Error::invalid(
                "conv",
                format!("kernel {ws:?} does not fit input {xs:?} with padding {padding:?}, stride {stride:?}"),
            )
        })?;
        let out = kernels::conv3d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let [od, oh, ow] = geom.output;
        let shape = vec![geom.batch, geom.c_out, od, oh, ow];
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, b, geom }, rg))
    }

    /// 2D cross-correlation: `x[B, Cin, H, W]`, `w[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x5, w5, b, [1, stride, stride], [0, padding, padding])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// 1D cross-correlation: `x[B, Cin, L]`, `w[Cout, Cin, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, 1, xs[2]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, 1, ws[2]])?;
        let y = self.conv3d(x5, w5, b, [1, 1, stride], [0, 0, padding])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[4]])
    }

    /// Single-level orthonormal Haar analysis `[B,C,H,W] -> [B,C,4,H/2,W/2]`.
    pub fn dwt(&mut self, x: Var) -> Result<Var> {
        let value = wavelet::dwt(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Haar { x, inverse: false }, rg))
    }

    /// Haar synthesis `[B,C,4,H2,W2] -> [B,C,2*H2,2*W2]`.
    pub fn iwt(&mut self, x: Var) -> Result<Var> {
        let value = wavelet::iwt(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Haar { x, inverse: true }, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            // keep leaf grads; interior grads are no longer needed
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each parent needing a grad.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                match op {
                    BinaryOp::Add => {
                        out.push((*a, g.to_vec()));
                        out.push((*b, g.to_vec()));
                    }
                    BinaryOp::Sub => {
                        out.push((*a, g.to_vec()));
                        out.push((*b, g.iter().map(|&v| -v).collect()));
                    }
                    BinaryOp::Mul => {
                        if self.needs(*a) {
                            out.push((*a, g.iter().zip(bd).map(|(&g, &b)| g * b).collect()));
                        }
                        if self.needs(*b) {
                            out.push((*b, g.iter().zip(ad).map(|(&g, &a)| g * a).collect()));
                        }
                    }
                    BinaryOp::Div => {
                        if self.needs(*a) {
                            out.push((*a, g.iter().zip(bd).map(|(&g, &b)| g / b).collect()));
                        }
                        if self.needs(*b) {
                            let y = node.value.data();
                            out.push((*b, g.iter().zip(y).zip(bd).map(|((&g, &y), &b)| -g * y / b).collect()));
                        }
                    }
                }
            }
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::MulScalar(x, s) => out.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::AddChannel { x, b, per_batch } => {
                out.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let xs = node.value.shape();
                    let (batch, ch) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = vec![T::zero(); if *per_batch { batch * ch } else { ch }];
                    for n in 0..batch {
                        for c in 0..ch {
                            let off = (n * ch + c) * inner;
                            let s: T = g[off..off + inner].iter().copied().sum();
                            gb[if *per_batch { n * ch + c } else { c }] += s;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = kernels::bmm_backward(
                    self.data(*a),
                    self.data(*b),
                    g,
                    sa[0],
                    sa[1],
                    sa[2],
                    sb[2],
                    (self.needs(*a), self.needs(*b)),
                );
                out.extend(da.map(|d| (*a, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::Softmax { x, axis } => {
                let (o, l, inner) = kernels::axis_split(node.value.shape(), *axis);
                out.push((*x, kernels::softmax_backward(node.value.data(), g, o, l, inner)));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute(x, perm) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = gt.permute(&inverse_perm(perm)).expect("inverse permutation");
                out.push((*x, back.into_vec()));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = kernels::axis_split(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let off = (o * total + start) * inner;
                            gv.extend_from_slice(&g[off..off + len * inner]);
                        }
                        out.push((v, gv));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = kernels::axis_split(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let off = (o * full + start) * inner;
                    gx[off..off + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, gx));
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Sqrt(x) => {
                let y = node.value.data();
                let half = T::from_f64_lossy(0.5);
                out.push((*x, g.iter().zip(y).map(|(&g, &y)| g * half / y).collect()));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                out.push((*x, g.iter().zip(y).map(|(&g, &y)| g * y).collect()));
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                out.push((*x, gx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let shape = node.value.shape();
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.data(*x),
                    self.data(*gamma),
                    stats,
                    g,
                    shape[0],
                    shape[1],
                    shape[2..].iter().product(),
                    *groups,
                );
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes: usize = s[..r - 2].iter().product();
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::AvgPool2(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes: usize = s[..r - 2].iter().product();
                let quarter = T::from_f64_lossy(0.25);
                let mut gx = vec![T::zero(); planes * 4 * h * w];
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * 2 * h + i) * 2 * w + j] = g[(p * h + i / 2) * w + j / 2] * quarter;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Embedding { table, indices } => {
                let s = self.shape(*table);
                let dim = s[1];
                let mut gt = vec![T::zero(); s[0] * dim];
                for (row, &i) in indices.iter().enumerate() {
                    for k in 0..dim {
                        gt[i * dim + k] += g[row * dim + k];
                    }
                }
                out.push((*table, gt));
            }
            Op::Conv { x, w, b, geom } => {
                let need_b = b.is_some_and(|b| self.needs(b));
                let grads = kernels::conv3d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    (self.needs(*x), self.needs(*w), need_b),
                );
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Haar { x, inverse } => {
                // orthonormal: the adjoint of analysis is synthesis and vice versa
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let back = if *inverse { wavelet::dwt(&gt) } else { wavelet::iwt(&gt) };
                out.push((*x, back.expect("adjoint shape").into_vec()));
            }
        }
        out
    }
}
