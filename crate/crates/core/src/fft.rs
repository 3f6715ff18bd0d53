//! Square 2D FFTs on row-major buffers, built from rustfft row passes and
//! blocked in-place transposes.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn rows(&self, fft: &Arc<dyn Fft<f64>>, buf: &mut [Complex64], rows: Range<usize>) {
        if rows.is_empty() {
            return;
        }
        let n = self.n;
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(&mut buf[rows.start * n..rows.end * n], &mut scratch);
    }

    /// Unnormalized 1D forward transforms of each length-`n` chunk of `buf`.
    pub fn forward_rows(&self, buf: &mut [Complex64]) {
        let len = buf.len() / self.n;
        self.rows(&self.forward, buf, 0..len);
    }

    /// Unnormalized 1D inverse transforms of each length-`n` chunk of `buf`.
    pub fn inverse_rows(&self, buf: &mut [Complex64]) {
        let len = buf.len() / self.n;
        self.rows(&self.inverse, buf, 0..len);
    }

    /// Unnormalized forward transform. Only `live_rows` may hold nonzero
    /// input; the remaining rows are assumed zero and skipped. The result is
    /// left transposed (`buf[fx * n + fy]`).
    pub fn forward_transposed(&self, buf: &mut [Complex64], live_rows: Range<usize>) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        self.rows(&self.forward, buf, live_rows);
        transpose(buf, self.n);
        self.rows(&self.forward, buf, 0..self.n);
    }

    /// Inverse of [`Fft2::forward_transposed`], including the `1/n^2`
    /// factor. Only `keep_rows` of the output are computed; other rows hold
    /// partial results and must be ignored.
    pub fn inverse_from_transposed(&self, buf: &mut [Complex64], keep_rows: Range<usize>) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        self.rows(&self.inverse, buf, 0..self.n);
        transpose(buf, self.n);
        let scale = 1.0 / (self.n * self.n) as f64;
        let n = self.n;
        self.rows(&self.inverse, buf, keep_rows.clone());
        for v in &mut buf[keep_rows.start * n..keep_rows.end * n] {
            *v *= scale;
        }
    }

    /// Standard-layout unnormalized forward transform.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.forward_transposed(buf, 0..self.n);
        transpose(buf, self.n);
    }

    /// Standard-layout inverse transform with `1/n^2` normalization.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        transpose(buf, self.n);
        self.inverse_from_transposed(buf, 0..self.n);
    }
}

/// Signed frequency index for FFT bin `k` of an `n`-point transform.
pub fn freq_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// In-place transpose of an `n x n` row-major matrix.
pub fn transpose<T: Copy>(buf: &mut [T], n: usize) {
    const B: usize = 16;
    for bi in (0..n).step_by(B) {
        for bj in (bi..n).step_by(B) {
            let i_end = (bi + B).min(n);
            let j_end = (bj + B).min(n);
            for i in bi..i_end {
                let j_start = if bi == bj { i + 1 } else { bj };
                for j in j_start..j_end {
                    buf.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft2(input: &[Complex64], n: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = Complex64::default();
                for r in 0..n {
                    for c in 0..n {
                        let ang = -2.0 * PI * ((u * r + v * c) as f64) / n as f64;
                        acc += input[r * n + c] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[u * n + v] = acc;
            }
        }
        out
    }

    fn sample(n: usize) -> Vec<Complex64> {
        (0..n * n)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect()
    }

    #[test]
    fn transpose_matches_definition() {
        for n in [1, 3, 8, 33, 70] {
            let m: Vec<usize> = (0..n * n).collect();
            let mut t = m.clone();
            transpose(&mut t, n);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(t[i * n + j], m[j * n + i]);
                }
            }
        }
    }

    #[test]
    fn forward_matches_naive_dft() {
        let n = 8;
        let x = sample(n);
        let expected = naive_dft2(&x, n);
        let mut buf = x.clone();
        Fft2::new(n).forward(&mut buf);
        for (a, b) in buf.iter().zip(&expected) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn round_trip_with_skipped_rows() {
        let n = 16;
        let mut x = vec![Complex64::default(); n * n];
        for r in 4..12 {
            for c in 0..n {
                x[r * n + c] = Complex64::new(r as f64 + 0.5, c as f64 * 0.25);
            }
        }
        let fft = Fft2::new(n);
        let mut buf = x.clone();
        fft.forward_transposed(&mut buf, 4..12);
        let mut full = x.clone();
        fft.forward(&mut full);
        transpose(&mut full, n);
        for (a, b) in buf.iter().zip(&full) {
            assert!((a - b).norm() < 1e-10);
        }
        fft.inverse_from_transposed(&mut buf, 4..12);
        for r in 4..12 {
            for c in 0..n {
                assert!((buf[r * n + c] - x[r * n + c]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn freq_indices() {
        let f: Vec<f64> = (0..4).map(|k| freq_index(k, 4)).collect();
        assert_eq!(f, vec![0.0, 1.0, -2.0, -1.0]);
    }
}
