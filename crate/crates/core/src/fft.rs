use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Smallest length `>= n` whose prime factors are all at most 7.
pub fn good_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Two-dimensional FFT over a row-major `rows x cols` buffer.
///
/// The forward transform leaves the spectrum transposed (`cols x rows`);
/// products of spectra taken with the same plan are therefore consistent,
/// and `inverse` expects that layout.
pub struct Fft2 {
    pub rows: usize,
    pub cols: usize,
    fwd_r: Arc<dyn Fft<f64>>,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_r: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            fwd_r: planner.plan_fft_forward(cols),
            fwd_c: planner.plan_fft_forward(rows),
            inv_r: planner.plan_fft_inverse(cols),
            inv_c: planner.plan_fft_inverse(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, buf: &mut Vec<Complex<f64>>) {
        self.fwd_r.process(buf);
        *buf = transpose(buf, self.rows, self.cols);
        self.fwd_c.process(buf);
    }

    /// Inverse transform including the `1 / (rows * cols)` normalization.
    pub fn inverse(&self, buf: &mut Vec<Complex<f64>>) {
        self.inv_c.process(buf);
        *buf = transpose(buf, self.cols, self.rows);
        self.inv_r.process(buf);
        let s = 1.0 / self.len() as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

fn transpose(buf: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); buf.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = buf[r * cols + c];
                }
            }
        }
    }
    out
}
