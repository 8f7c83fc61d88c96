//! Real part of the discrete Fourier transform along the token axis.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;

/// Sequence lengths up to this use the direct O(n^2) sum.
pub const NAIVE_DFT_MAX: usize = 64;

/// `out[k, f] = sum_j cos(2 pi k j / n) * x[j, f]` for an `n x d` row-major block.
pub fn real_dft_columns<T: Scalar>(x: &[T], n: usize, d: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), n * d);
    if n <= NAIVE_DFT_MAX {
        naive_real_dft(x, n, d)
    } else {
        fft_real_dft(x, n, d)
    }
}

/// Operation count charged for one transform of an `n x d` block.
pub fn dft_cost(n: usize, d: usize) -> usize {
    if n <= NAIVE_DFT_MAX {
        2 * n * n * d
    } else {
        // The textbook 5 n log2 n per complex transform, one per feature.
        let log = (n as f64).log2().ceil() as usize;
        d * 5 * n * log
    }
}

pub fn naive_real_dft<T: Scalar>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let cos: Vec<T> = (0..n)
        .map(|m| T::from_f64_lossy((2.0 * std::f64::consts::PI * m as f64 / n as f64).cos()))
        .collect();
    let mut out = vec![T::zero(); n * d];
    for k in 0..n {
        let row = &mut out[k * d..(k + 1) * d];
        for j in 0..n {
            let c = cos[(k * j) % n];
            for (o, &v) in row.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                *o += c * v;
            }
        }
    }
    out
}

fn fft_real_dft<T: Scalar>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut out = vec![T::zero(); n * d];
    let mut column = vec![Complex::new(T::zero(), T::zero()); n];
    for f in 0..d {
        for j in 0..n {
            column[j] = Complex::new(x[j * d + f], T::zero());
        }
        fft.process(&mut column);
        for k in 0..n {
            out[k * d + f] = column[k].re;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_column_has_only_dc() {
        let out = naive_real_dft(&[1.0f64; 4], 4, 1);
        assert!(max_diff(&out, &[4.0, 0.0, 0.0, 0.0]) < 1e-12, "{out:?}");
    }

    #[test]
    fn fft_matches_naive_for_power_of_two_and_odd_lengths() {
        for &n in &[1usize, 2, 8, 64, 65, 100, 128, 301] {
            let d = 3;
            let x: Vec<f64> = (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let fast = fft_real_dft(&x, n, d);
            let slow = naive_real_dft(&x, n, d);
            assert!(max_diff(&fast, &slow) < 1e-9, "n={n}");
        }
    }
}
