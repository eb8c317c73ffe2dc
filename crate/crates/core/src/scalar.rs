//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type the networks, schedules and samplers are written against.
///
/// Implemented for `f32` and `f64`. The crate defaults (see the aliases at the
/// crate root) use `f64`; persistence always stores single precision.
pub trait Scalar:
    Float
    + FloatConst
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
    /// Lossy conversion from `f64`, used for constants and random draws.
    fn of(v: f64) -> Self;

    /// Lossless-as-possible conversion to `f64`.
    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline(always)]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const BLOCK: usize = 16;

/// `c += a · b` for row-major `a` (`m × k`), `b` (`k × n`) and `c` (`m × n`).
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime. Without FMA the
        // arithmetic is the same as the baseline path, only wider.
        unsafe { matmul_acc_avx2(a, b, c, k, n) };
        return;
    }
    matmul_acc_body(a, b, c, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<F: Scalar>(a: &[F], b: &[F], c: &mut [F], k: usize, n: usize) {
    matmul_acc_body(a, b, c, k, n);
}

/// Elements of `b` kept hot per pass over `a` (16 KiB of f64).
const TILE_ELEMS: usize = 2048;

#[inline(always)]
fn matmul_acc_body<F: Scalar>(a: &[F], b: &[F], c: &mut [F], k: usize, n: usize) {
    let tile = (TILE_ELEMS / n).clamp(1, k);
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + tile).min(k);
        let bt = &b[k0 * n..k1 * n];
        for (ar, cr) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            row_times_tile(&ar[k0..k1], bt, cr, n);
        }
        k0 = k1;
    }
}

/// `cr += ar · bt` for one output row.
#[inline(always)]
fn row_times_tile<F: Scalar>(ar: &[F], bt: &[F], cr: &mut [F], n: usize) {
    let mut start = 0;
    while start + BLOCK <= n {
        // Fixed width keeps the accumulators in registers.
        let mut acc = [F::zero(); BLOCK];
        acc.copy_from_slice(&cr[start..start + BLOCK]);
        for (&av, br) in ar.iter().zip(bt.chunks_exact(n)) {
            let bs: &[F; BLOCK] = br[start..start + BLOCK].try_into().unwrap();
            for (s, &bv) in acc.iter_mut().zip(bs) {
                *s += av * bv;
            }
        }
        cr[start..start + BLOCK].copy_from_slice(&acc);
        start += BLOCK;
    }
    if start < n {
        let w = n - start;
        let mut acc = [F::zero(); BLOCK];
        acc[..w].copy_from_slice(&cr[start..]);
        for (&av, br) in ar.iter().zip(bt.chunks_exact(n)) {
            for (s, &bv) in acc[..w].iter_mut().zip(&br[start..]) {
                *s += av * bv;
            }
        }
        cr[start..].copy_from_slice(&acc[..w]);
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose<F: Scalar>(m: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}
