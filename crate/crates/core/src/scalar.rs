use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor in the crate.
///
/// Implemented for `f32` (benchmarks, desk-scale training) and `f64`
/// (gradient checks and anything compared against an oracle).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + rustfft::FftNum
    + Send
    + Sync
    + 'static
{
    /// Short tag written into benchmark and run metadata.
    const PRECISION: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides and extents must address memory inside the three
    /// buffers; see [`matrixmultiply::dgemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Replaces every element by its exponential.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

impl Scalar for f32 {
    const PRECISION: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    /// Range reduction plus a degree-6 polynomial on `[-87, 88]`, within a
    /// few ulp of `f32::exp`; inputs outside that range go to `f32::exp`.
    fn exp_in_place(xs: &mut [f32]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        const ROUND: f32 = 12_582_912.0;
        for x in xs {
            let v = *x;
            let c = v.clamp(-87.0, 88.0);
            let n = (c * LOG2E + ROUND) - ROUND;
            let r = c - n * LN2_HI - n * LN2_LO;
            let p = ((((1.987_569_1e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
                + 1.666_666_5e-1)
                * r
                + 5.000_000_1e-1;
            let e = (p * r * r + r + 1.0) * f32::from_bits(((n as i32 + 127) << 23) as u32);
            *x = if (-87.0..=88.0).contains(&v) { e } else { v.exp() };
        }
    }
}

impl Scalar for f64 {
    const PRECISION: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_f32_exp_tracks_std() {
        let mut xs: Vec<f32> = (-9000..9000).map(|i| i as f32 * 0.01).collect();
        let want: Vec<f32> = xs.iter().map(|x| x.exp()).collect();
        f32::exp_in_place(&mut xs);
        for (got, want) in xs.iter().zip(&want) {
            assert!(
                got == want || (got - want).abs() <= 4.0 * f32::EPSILON * want,
                "{got} vs {want}"
            );
        }
        let mut edge = [f32::NEG_INFINITY, -110.0, 0.0, 100.0];
        f32::exp_in_place(&mut edge);
        assert_eq!(edge, [0.0, 0.0, 1.0, f32::INFINITY]);
    }
}
