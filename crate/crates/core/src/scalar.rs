//! Element types the engine can run on.
//!
//! Training and sampling use `f32`. The `f64` instantiation exists for
//! finite-difference gradient checks, which are unreliable in single
//! precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real floating-point element with a dense GEMM kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short dtype name used in diagnostics.
    const NAME: &'static str;

    /// `c <- alpha * a @ b + beta * c` for row/column strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the spans of all three operands were checked against
                // their slice lengths by every caller in this crate (see `span`),
                // and `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// One past the largest element offset touched by a `rows x cols` view.
fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major GEMM with optional transposes of the stored operands.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is stored `k x n`
/// (or `n x k` when `tb`); `c <- a' @ b' + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_checked<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}
