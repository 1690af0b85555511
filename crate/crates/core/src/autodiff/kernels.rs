//! Raw numeric kernels behind the recorded ops. These work on plain slices
//! and know nothing about the graph.

use crate::scalar::{gemm_checked, Scalar};

/// Geometry of a 3D cross-correlation over `[B, Cin, D, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        batch: usize,
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if stride[a] == 0 || kernel[a] == 0 || kernel[a] > padded {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(Self {
            batch,
            c_in,
            c_out,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Scalar multiply-accumulates of the forward pass.
    pub fn macs(&self) -> usize {
        self.batch * self.c_out * self.out_plane() * self.cols_rows()
    }
}

/// Output columns `lo..hi` whose input column `z * stride + tap - pad`
/// falls inside `0..width`.
fn valid_span(out: usize, width: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap).div_ceil(stride).min(out);
    let hi = if width + pad > tap {
        (width + pad - tap).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample `[Cin, D, H, W]` into `[Cin*kd*kh*kw, Do*Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            let inside = id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h;
                            if !inside {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            let (lo, hi) = valid_span(ow, w, sw, c, pw);
                            let row_out = &mut dst[o..o + ow];
                            row_out[..lo].fill(T::zero());
                            row_out[hi..].fill(T::zero());
                            let first = base + (lo * sw + c).saturating_sub(pw);
                            if sw == 1 {
                                row_out[lo..hi].copy_from_slice(&xc[first..first + hi - lo]);
                            } else {
                                for (k, v) in row_out[lo..hi].iter_mut().enumerate() {
                                    *v = xc[first + k * sw];
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters-adds columns back into one sample.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output;
    let p = g.out_plane();
    let mut row = 0;
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            if !(id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h) {
                                o += ow;
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            let (lo, hi) = valid_span(ow, w, sw, c, pw);
                            let first = base + (lo * sw + c).saturating_sub(pw);
                            for (k, &v) in src[o + lo..o + hi].iter().enumerate() {
                                xc[first + k * sw] += v;
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_plane();
    let k = g.cols_rows();
    let in_sz = g.c_in * g.in_plane();
    let out_sz = g.c_out * p;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm_checked(false, false, g.c_out, k, p, w, src, T::zero(), ob);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(p).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a conv w.r.t. input, weight and bias (each only if requested).
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = g.out_plane();
    let k = g.cols_rows();
    let in_sz = g.c_in * g.in_plane();
    let out_sz = g.c_out * p;
    let mut dx = need.0.then(|| vec![T::zero(); g.batch * in_sz]);
    let mut dw = need.1.then(|| vec![T::zero(); g.c_out * k]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for bi in 0..g.batch {
            for (co, row) in dy[bi * out_sz..(bi + 1) * out_sz].chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let dyb = &dy[bi * out_sz..(bi + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW[co, r] += sum_p dy[co, p] * cols[r, p]
            gemm_checked(false, true, g.c_out, p, k, dyb, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
            if pointwise {
                gemm_checked(true, false, k, g.c_out, p, w, dyb, T::zero(), dxb);
            } else {
                gemm_checked(true, false, k, g.c_out, p, w, dyb, T::zero(), &mut dcols);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Batched `[B,M,K] @ [B,K,N]`.
pub fn bmm<T: Scalar>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        gemm_checked(
            false,
            false,
            m,
            k,
            n,
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            T::zero(),
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    out
}

/// Backward of `bmm`; `da = dc @ b^T`, `db = a^T @ dc`.
#[allow(clippy::too_many_arguments)]
pub fn bmm_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    dc: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut da = need.0.then(|| vec![T::zero(); batch * m * k]);
    let mut db = need.1.then(|| vec![T::zero(); batch * k * n]);
    for bi in 0..batch {
        let dcb = &dc[bi * m * n..(bi + 1) * m * n];
        if let Some(da) = da.as_mut() {
            let bb = &b[bi * k * n..(bi + 1) * k * n];
            gemm_checked(false, true, m, n, k, dcb, bb, T::zero(), &mut da[bi * m * k..(bi + 1) * m * k]);
        }
        if let Some(db) = db.as_mut() {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            gemm_checked(true, false, k, m, n, ab, dcb, T::zero(), &mut db[bi * k * n..(bi + 1) * k * n]);
        }
    }
    (da, db)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Per-(sample, group) statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[B, C, S]` (S = product of trailing dims).
#[allow(clippy::too_many_arguments)]
pub fn group_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, GroupNormStats<T>) {
    let cg = channels / groups;
    let n = cg * spatial;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for gi in 0..groups {
            let start = (b * channels + gi * cg) * spatial;
            let xs = &x[start..start + n];
            let m = xs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            let (mt, rt) = (T::from_f64_lossy(m), T::from_f64_lossy(r));
            mean.push(mt);
            rstd.push(rt);
            for c in 0..cg {
                let ch = gi * cg + c;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let off = start + c * spatial;
                for s in 0..spatial {
                    y[off + s] = (x[off + s] - mt) * rt * gm + bt;
                }
            }
        }
    }
    (y, GroupNormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    stats: &GroupNormStats<T>,
    dy: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let n = T::from_usize(cg * spatial).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for gi in 0..groups {
            let k = b * groups + gi;
            let (m, r) = (stats.mean[k], stats.rstd[k]);
            let start = (b * channels + gi * cg) * spatial;
            // sums of dxhat and dxhat * xhat over the group
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for c in 0..cg {
                let ch = gi * cg + c;
                let off = start + c * spatial;
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for s in 0..spatial {
                    let xhat = (x[off + s] - m) * r;
                    let g = dy[off + s];
                    dg += g * xhat;
                    dbt += g;
                    let dxh = g * gamma[ch];
                    s1 += dxh;
                    s2 += dxh * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            let (s1, s2) = (s1 / n, s2 / n);
            for c in 0..cg {
                let ch = gi * cg + c;
                let off = start + c * spatial;
                for s in 0..spatial {
                    let xhat = (x[off + s] - m) * r;
                    let dxh = dy[off + s] * gamma[ch];
                    dx[off + s] = r * (dxh - s1 - xhat * s2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
