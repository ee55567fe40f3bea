use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point element type of a tensor (`f32` for training, `f64` for checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    /// `C += A·B` for strided row/column layouts, `A` is `m×k`, `B` is `k×n`.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie inside
    /// its buffer, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), c: *mut Self, sc: (isize, isize));
}

impl Scalar for f32 {
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const f32, sa: (isize, isize), b: *const f32, sb: (isize, isize), c: *mut f32, sc: (isize, isize)) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, 1.0, c, sc.0, sc.1);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const f64, sa: (isize, isize), b: *const f64, sb: (isize, isize), c: *mut f64, sc: (isize, isize)) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, 1.0, c, sc.0, sc.1);
    }
}
