//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag, used in diagnostics.
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;

    /// `c[n×m] += a[n×k]·b[k×m]` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(n: usize, k: usize, m: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]);
}

macro_rules! checked_gemm {
    ($f:path, $n:ident, $k:ident, $m:ident, $a:ident, $rsa:ident, $csa:ident, $b:ident, $rsb:ident, $csb:ident, $c:ident) => {{
        assert!($a.len() >= $n * $k && $b.len() >= $k * $m && $c.len() >= $n * $m, "gemm operand too short");
        // SAFETY: lengths checked above; the strides describe dense matrices
        // that lie inside those slices.
        unsafe {
            $f(
                $n, $k, $m, 1.0, $a.as_ptr(), $rsa, $csa, $b.as_ptr(), $rsb, $csb, 1.0,
                $c.as_mut_ptr(), $m as isize, 1,
            )
        }
    }};
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }

    fn gemm(n: usize, k: usize, m: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]) {
        checked_gemm!(matrixmultiply::sgemm, n, k, m, a, rsa, csa, b, rsb, csb, c)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }

    fn gemm(n: usize, k: usize, m: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]) {
        checked_gemm!(matrixmultiply::dgemm, n, k, m, a, rsa, csa, b, rsb, csb, c)
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}
