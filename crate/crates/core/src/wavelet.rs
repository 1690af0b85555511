//! Single-level orthonormal 2D Haar transform and the 5D subband layout.
//!
//! With `L = [1, 1]/sqrt(2)` and `H = [-1, 1]/sqrt(2)`, the four analysis
//! kernels are the outer products `L L^T`, `L H^T`, `H L^T`, `H H^T`
//! (row index vertical, column index horizontal). Subbands are stacked on a
//! frequency axis of extent 4 in the order `ll, lh, hl, hh`, giving
//! `[B, C, 4, H/2, W/2]`. `lh` is the horizontal-difference detail.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of subbands on the frequency axis.
pub const SUBBANDS: usize = 4;

/// Subband names in frequency-axis order.
pub const SUBBAND_NAMES: [&str; SUBBANDS] = ["ll", "lh", "hl", "hh"];

/// The four 2x2 analysis kernels, row-major, in subband order.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarKernels {
    pub kernels: [[[f64; 2]; 2]; SUBBANDS],
}

impl Default for HaarKernels {
    fn default() -> Self {
        Self::new()
    }
}

impl HaarKernels {
    pub fn new() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let low = [r, r];
        let high = [-r, r];
        let outer = |a: [f64; 2], b: [f64; 2]| [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]];
        Self {
            kernels: [outer(low, low), outer(low, high), outer(high, low), outer(high, high)],
        }
    }

    pub fn flat(&self, s: usize) -> [f64; 4] {
        let k = self.kernels[s];
        [k[0][0], k[0][1], k[1][0], k[1][1]]
    }
}

/// A `[B, C, 4, H/2, W/2]` tensor of Haar coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletStack<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> WaveletStack<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 || s[2] != SUBBANDS {
            return Err(Error::invalid(
                "wavelet stack",
                format!("expected [B, C, 4, H2, W2], got {s:?}"),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Coefficients of subband `s` as `[B, C, H2, W2]`.
    pub fn subband(&self, s: usize) -> Tensor<T> {
        let sh = self.shape();
        let (b, c, h2, w2) = (sh[0], sh[1], sh[3], sh[4]);
        let plane = h2 * w2;
        let src = self.tensor.data();
        let mut out = Vec::with_capacity(b * c * plane);
        for bc in 0..b * c {
            let off = (bc * SUBBANDS + s) * plane;
            out.extend_from_slice(&src[off..off + plane]);
        }
        Tensor::from_parts(vec![b, c, h2, w2], out)
    }
}

/// Haar analysis of `[B, C, H, W]` (H, W even) into `[B, C, 4, H/2, W/2]`.
pub fn dwt<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::invalid("dwt", format!("expected [B, C, H, W], got {s:?}")));
    }
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("dwt", format!("height and width must be even, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let half = T::from_f64_lossy(0.5);
    let src = image.data();
    let mut out = vec![T::zero(); bc * SUBBANDS * h2 * w2];
    for p in 0..bc {
        let img = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * SUBBANDS * h2 * w2..(p + 1) * SUBBANDS * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = img[2 * i * w + 2 * j];
                let b = img[2 * i * w + 2 * j + 1];
                let c = img[(2 * i + 1) * w + 2 * j];
                let d = img[(2 * i + 1) * w + 2 * j + 1];
                let o = i * w2 + j;
                dst[o] = (a + b + c + d) * half;
                dst[h2 * w2 + o] = (-a + b - c + d) * half;
                dst[2 * h2 * w2 + o] = (-a - b + c + d) * half;
                dst[3 * h2 * w2 + o] = (a - b - c + d) * half;
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], SUBBANDS, h2, w2], out))
}

/// Haar synthesis, the exact inverse (and adjoint) of [`dwt`].
pub fn iwt<T: Scalar>(stack: &Tensor<T>) -> Result<Tensor<T>> {
    let s = stack.shape();
    if s.len() != 5 || s[2] != SUBBANDS {
        return Err(Error::invalid("iwt", format!("expected [B, C, 4, H2, W2], got {s:?}")));
    }
    let (bc, h2, w2) = (s[0] * s[1], s[3], s[4]);
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::from_f64_lossy(0.5);
    let src = stack.data();
    let mut out = vec![T::zero(); bc * h * w];
    let plane = h2 * w2;
    for p in 0..bc {
        let u = &src[p * SUBBANDS * plane..(p + 1) * SUBBANDS * plane];
        let img = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let o = i * w2 + j;
                let (ll, lh, hl, hh) = (u[o], u[plane + o], u[2 * plane + o], u[3 * plane + o]);
                img[2 * i * w + 2 * j] = (ll - lh - hl + hh) * half;
                img[2 * i * w + 2 * j + 1] = (ll + lh - hl - hh) * half;
                img[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) * half;
                img[(2 * i + 1) * w + 2 * j + 1] = (ll + lh + hl + hh) * half;
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], h, w], out))
}

pub fn dwt_stack<T: Scalar>(image: &Tensor<T>) -> Result<WaveletStack<T>> {
    WaveletStack::new(dwt(image)?)
}

pub fn iwt_stack<T: Scalar>(stack: &WaveletStack<T>) -> Result<Tensor<T>> {
    iwt(stack.tensor())
}

/// Haar analysis with subbands folded into channels: `[B, 4C, H/2, W/2]`,
/// channel `4c + s` holding subband `s` of source channel `c`.
pub fn dwt_concat<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let u = dwt(image)?;
    let s = u.shape().to_vec();
    u.reshape(&[s[0], s[1] * SUBBANDS, s[3], s[4]])
}

/// Inverse of [`dwt_concat`].
pub fn iwt_concat<T: Scalar>(coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let s = coeffs.shape();
    if s.len() != 4 || s[1] % SUBBANDS != 0 {
        return Err(Error::invalid(
            "iwt_concat",
            format!("expected [B, 4C, H2, W2], got {s:?}"),
        ));
    }
    let u = coeffs.reshape(&[s[0], s[1] / SUBBANDS, SUBBANDS, s[2], s[3]])?;
    iwt(&u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, h, w], v).unwrap()
    }

    #[test]
    fn kernels_are_orthonormal() {
        let k = HaarKernels::new();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = k.flat(a).iter().zip(k.flat(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-15, "{a},{b}: {dot}");
            }
        }
    }

    /// Direct evaluation against the kernel table, independent of the
    /// hand-unrolled butterflies in `dwt`.
    #[test]
    fn dwt_matches_kernel_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 6, 4], -1.0, 1.0, &mut rng);
        let u = dwt(&x).unwrap();
        let k = HaarKernels::new();
        for b in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    for i in 0..3 {
                        for j in 0..2 {
                            let mut acc = 0.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    acc += k.kernels[s][di][dj] * x.at(&[b, c, 2 * i + di, 2 * j + dj]);
                                }
                            }
                            assert!((u.at(&[b, c, s, i, j]) - acc).abs() < 1e-14);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_has_only_ll() {
        let u = dwt(&Tensor::<f64>::full(&[1, 1, 4, 4], 2.0)).unwrap();
        let st = WaveletStack::new(u).unwrap();
        assert!(st.subband(0).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        for s in 1..4 {
            assert!(st.subband(s).data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        let u = dwt(&img(2, 2, &[1., 3., 2., 4.])).unwrap();
        let got = u.to_f64_vec();
        for (g, w) in got.iter().zip([5.0, 2.0, 1.0, 0.0]) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
        let energy: f64 = got.iter().map(|v| v * v).sum();
        assert!((energy - 30.0).abs() < 1e-12);

        let back = iwt(&Tensor::<f64>::from_f64(&[1, 1, 4, 1, 1], &[5., 2., 1., 0.]).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 2]);
        for (g, w) in back.to_f64_vec().iter().zip([1., 3., 2., 4.]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ll_only_inverts_to_constant() {
        let mut v = vec![0.0; 4 * 9];
        v[..9].fill(4.0);
        let x = iwt(&Tensor::<f64>::from_f64(&[1, 1, 4, 3, 3], &v).unwrap()).unwrap();
        assert!(x.data().iter().all(|&p| (p - 2.0).abs() < 1e-12));
    }

    #[test]
    fn odd_sizes_and_bad_stacks_are_rejected() {
        assert!(dwt(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
        assert!(dwt(&Tensor::<f32>::zeros(&[1, 1, 4, 5])).is_err());
        assert!(iwt(&Tensor::<f32>::zeros(&[1, 1, 3, 2, 2])).is_err());
        assert!(WaveletStack::new(Tensor::<f32>::zeros(&[1, 1, 2, 2, 2])).is_err());
    }

    #[test]
    fn concat_layout_is_channel_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 4, 6], -1.0, 1.0, &mut rng);
        let c = dwt_concat(&x).unwrap();
        assert_eq!(c.shape(), &[2, 12, 2, 3]);
        let u = dwt(&x).unwrap();
        // index-permutation oracle: channel 4*ch + s <- (ch, s)
        for b in 0..2 {
            for ch in 0..3 {
                for s in 0..4 {
                    for i in 0..2 {
                        for j in 0..3 {
                            assert_eq!(c.at(&[b, 4 * ch + s, i, j]), u.at(&[b, ch, s, i, j]));
                        }
                    }
                }
            }
        }
        let back = iwt_concat(&c).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn unit_noise_stays_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[4, 3, 64, 64], &mut rng);
        let st = dwt_stack(&x).unwrap();
        for s in 0..4 {
            let band = st.subband(s);
            let n = band.numel() as f64;
            let mean = band.data().iter().sum::<f64>() / n;
            let var = band.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(n >= 1e4 && (0.9..=1.1).contains(&var), "subband {s}: var {var}");
        }
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_energy(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::rand_uniform(&[1, 2, 2 * h, 2 * w], -1.0, 1.0, &mut rng);
            let u = dwt(&x).unwrap();
            let back = iwt(&u).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-5);
            let (ex, eu) = (x.sum_sq(), u.sum_sq());
            prop_assert!((ex - eu).abs() / ex < 1e-4);
        }

        #[test]
        fn linearity(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::rand_uniform(&[1, 1, 6, 4], -1.0, 1.0, &mut rng);
            let y = Tensor::<f32>::rand_uniform(&[1, 1, 6, 4], -1.0, 1.0, &mut rng);
            let (af, bf) = (a as f32, b as f32);
            let mix = x.zip_map(&y, "mix", |p, q| af * p + bf * q).unwrap();
            let lhs = dwt(&mix).unwrap();
            let rhs = dwt(&x).unwrap().zip_map(&dwt(&y).unwrap(), "mix", |p, q| af * p + bf * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }
    }
}
