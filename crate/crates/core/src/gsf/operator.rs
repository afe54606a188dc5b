use rustfft::num_complex::Complex;

use super::{band_extent, distance_weight, extrapolated_value, GsfAtlas};
use crate::cube::IdealTransient;
use crate::error::{Error, Result};
use crate::fft::{good_size, Fft2};

/// Largest slice basis used before falling back to slice-by-slice application.
const MAX_SLICE_RANK: usize = 48;

/// Spatially varying glare operator assembled from an atlas.
///
/// Each atlas entry is resampled as a kernel over offsets `(dr, dc)` with
/// `dr` inside the band and `dc` spanning the full sensor width. The column
/// for source pixel `p` blends the entry kernels with inverse-square weights,
/// restricts them to the sensor and renormalizes, which is the band-masked
/// interpolation of the distance-weighted atlas evaluated without building
/// full maps.
#[derive(Debug, Clone)]
pub struct GlareOperator {
    rows: usize,
    cols: usize,
    above: usize,
    below: usize,
    kcols: usize,
    entries: Vec<KernelEntry>,
    peak_coefficient: f64,
}

#[derive(Debug, Clone)]
struct KernelEntry {
    source: (usize, usize),
    outscatter: f64,
    kernel: Vec<f64>,
    /// Summed-area table with `kcols + 1` columns.
    sat: Vec<f64>,
}

/// Glare from one source pixel onto the rows of its band.
#[derive(Debug, Clone, PartialEq)]
pub struct GlareColumn {
    pub source: (usize, usize),
    pub row_lo: usize,
    pub n_rows: usize,
    pub cols: usize,
    /// Normalized spread over the band, summing to one unless empty.
    pub values: Vec<f64>,
    pub outscatter: f64,
}

impl GlareColumn {
    /// Fraction of the source's light landing on `(r, c)`.
    pub fn coefficient(&self, r: usize, c: usize) -> f64 {
        if r < self.row_lo || r >= self.row_lo + self.n_rows {
            return 0.0;
        }
        self.outscatter * self.values[(r - self.row_lo) * self.cols + c]
    }
}

impl GlareOperator {
    pub fn new(atlas: &GsfAtlas) -> Result<Self> {
        atlas.validate()?;
        let (rows, cols) = (atlas.rows, atlas.cols);
        let (above, below) = match atlas.band_rows {
            Some(b) => {
                let (a, w) = band_extent(b);
                (a.min(rows - 1), w.min(rows - 1))
            }
            None => (rows - 1, rows - 1),
        };
        let krows = above + below + 1;
        let kcols = 2 * cols - 1;
        let entries = atlas
            .entries
            .iter()
            .map(|e| {
                let weighted = distance_weight(e, atlas.decay_w, atlas.decay_sign)?;
                let mut kernel = vec![0.0; krows * kcols];
                for a in 0..krows {
                    let r = e.source.0 as isize + a as isize - above as isize;
                    for b in 0..kcols {
                        let c = e.source.1 as isize + b as isize - (cols as isize - 1);
                        kernel[a * kcols + b] = extrapolated_value(
                            &weighted.map,
                            rows,
                            cols,
                            r,
                            c,
                            atlas.decay_w,
                            atlas.decay_sign,
                        );
                    }
                }
                kernel[above * kcols + cols - 1] = 0.0;
                let mut sat = vec![0.0; (krows + 1) * (kcols + 1)];
                for a in 0..krows {
                    let mut run = 0.0;
                    for b in 0..kcols {
                        run += kernel[a * kcols + b];
                        sat[(a + 1) * (kcols + 1) + b + 1] = sat[a * (kcols + 1) + b + 1] + run;
                    }
                }
                Ok(KernelEntry {
                    source: e.source,
                    outscatter: e.outscatter,
                    kernel,
                    sat,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut op = Self {
            rows,
            cols,
            above,
            below,
            kcols,
            entries,
            peak_coefficient: 0.0,
        };
        op.peak_coefficient = op
            .entries
            .iter()
            .map(|e| {
                let col = op
                    .column(e.source)
                    .expect("entry sources lie on the sensor");
                col.outscatter * col.values.iter().fold(0.0f64, |m, v| m.max(*v))
            })
            .fold(0.0, f64::max);
        Ok(op)
    }

    /// Largest fraction of a measured source's light reaching a single other pixel.
    pub fn peak_coefficient(&self) -> f64 {
        self.peak_coefficient
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Rows above and below an aggressor reached by its glare.
    pub fn band(&self) -> (usize, usize) {
        (self.above, self.below)
    }

    fn weights(&self, p: (usize, usize)) -> Vec<(usize, f64)> {
        if let Some(i) = self.entries.iter().position(|e| e.source == p) {
            return vec![(i, 1.0)];
        }
        let raw: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let dr = e.source.0 as f64 - p.0 as f64;
                let dc = e.source.1 as f64 - p.1 as f64;
                1.0 / (dr * dr + dc * dc)
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter()
            .enumerate()
            .map(|(i, w)| (i, w / s))
            .collect()
    }

    fn row_span(&self, p: (usize, usize)) -> (usize, usize) {
        let lo = p.0 - self.above.min(p.0);
        let hi = (p.0 + self.below).min(self.rows - 1);
        (lo, hi)
    }

    fn rect_sum(&self, e: &KernelEntry, a0: usize, a1: usize, b0: usize, b1: usize) -> f64 {
        let w = self.kcols + 1;
        e.sat[a1 * w + b1] - e.sat[a0 * w + b1] - e.sat[a1 * w + b0] + e.sat[a0 * w + b0]
    }

    /// Per-entry blend coefficients scaled by outscatter over the column mass,
    /// and the fraction of light kept by the source pixel.
    fn pixel_coefficients(&self, p: (usize, usize)) -> (Vec<(usize, f64)>, f64) {
        let (lo, hi) = self.row_span(p);
        let a0 = lo + self.above - p.0;
        let a1 = hi + self.above - p.0 + 1;
        let b0 = self.cols - 1 - p.1;
        let weights = self.weights(p);
        let mut z = 0.0;
        let mut outscatter = 0.0;
        for &(i, w) in &weights {
            let e = &self.entries[i];
            z += w * self.rect_sum(e, a0, a1, b0, b0 + self.cols);
            outscatter += w * e.outscatter;
        }
        if !(z > 0.0) {
            return (Vec::new(), 1.0);
        }
        let coefs = weights
            .into_iter()
            .map(|(i, w)| (i, outscatter * w / z))
            .collect();
        (coefs, 1.0 - outscatter)
    }

    /// Spread of glare leaving pixel `p`.
    pub fn column(&self, p: (usize, usize)) -> Result<GlareColumn> {
        if p.0 >= self.rows || p.1 >= self.cols {
            return Err(Error::Config(format!(
                "pixel {p:?} is outside the atlas coverage"
            )));
        }
        let (lo, hi) = self.row_span(p);
        let n_rows = hi - lo + 1;
        let cols = self.cols;
        let mut values = vec![0.0; n_rows * cols];
        let weights = self.weights(p);
        let mut outscatter = 0.0;
        for &(i, w) in &weights {
            let e = &self.entries[i];
            outscatter += w * e.outscatter;
            for r in lo..=hi {
                let a = r + self.above - p.0;
                let start = a * self.kcols + cols - 1 - p.1;
                let src = &e.kernel[start..start + cols];
                axpy(&mut values[(r - lo) * cols..(r - lo + 1) * cols], src, w);
            }
        }
        let z: f64 = values.iter().sum();
        if z > 0.0 {
            for v in values.iter_mut() {
                *v /= z;
            }
        } else {
            outscatter = 0.0;
        }
        Ok(GlareColumn {
            source: p,
            row_lo: lo,
            n_rows,
            cols,
            values,
            outscatter,
        })
    }

    /// Glare received by every pixel (excluding each source's own share) for
    /// each input intensity map, by per-entry FFT convolution.
    pub fn glare_maps(&self, maps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (rows, cols) = (self.rows, self.cols);
        let m = rows * cols;
        if let Some(bad) = maps.iter().find(|x| x.len() != m) {
            return Err(Error::Dimension(format!(
                "map has {} pixels, operator expects {m}",
                bad.len()
            )));
        }
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let ne = self.entries.len();
        let mut coef = vec![0.0; m * ne];
        for r in 0..rows {
            for c in 0..cols {
                let p = r * cols + c;
                for (i, v) in self.pixel_coefficients((r, c)).0 {
                    coef[p * ne + i] = v;
                }
            }
        }
        let fr = good_size(rows + self.above.max(self.below));
        let fc = good_size(self.kcols);
        let fft = Fft2::new(fr, fc);
        let zero = Complex::new(0.0, 0.0);
        let mut acc = vec![vec![zero; fr * fc]; maps.len()];
        let krows = self.above + self.below + 1;
        for (i, e) in self.entries.iter().enumerate() {
            if !(0..m).any(|p| coef[p * ne + i] != 0.0) {
                continue;
            }
            let mut kf = vec![zero; fr * fc];
            for a in 0..krows {
                for b in 0..self.kcols {
                    kf[a * fc + b] = Complex::new(e.kernel[a * self.kcols + b], 0.0);
                }
            }
            fft.forward(&mut kf);
            for (x, acc) in maps.iter().zip(acc.iter_mut()) {
                let mut buf = vec![zero; fr * fc];
                for r in 0..rows {
                    for c in 0..cols {
                        let p = r * cols + c;
                        buf[r * fc + c] = Complex::new(coef[p * ne + i] * x[p], 0.0);
                    }
                }
                fft.forward(&mut buf);
                for ((a, b), k) in acc.iter_mut().zip(&buf).zip(&kf) {
                    *a += b * k;
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|mut spec| {
                fft.inverse(&mut spec);
                let mut out = vec![0.0; m];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = spec[(r + self.above) * fc + c + cols - 1].re;
                    }
                }
                out
            })
            .collect())
    }

    /// Fraction of its own light each pixel keeps.
    pub fn retained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.pixel_coefficients((r, c)).1);
            }
        }
        out
    }

    /// Operator applied to one intensity map.
    pub fn apply_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let glare = self.glare_maps(&[x.to_vec()])?.pop().unwrap_or_default();
        Ok(self
            .retained()
            .iter()
            .zip(x)
            .zip(&glare)
            .map(|((d, x), g)| d * x + g)
            .collect())
    }

    /// Operator applied column by column; quadratic cost, for small sensors.
    pub fn apply_map_direct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cols = self.cols;
        let mut y = vec![0.0; self.rows * cols];
        for r in 0..self.rows {
            for c in 0..cols {
                let xv = x[r * cols + c];
                let col = self.column((r, c))?;
                y[r * cols + c] += (1.0 - col.outscatter) * xv;
                if xv == 0.0 {
                    continue;
                }
                for (k, v) in col.values.iter().enumerate() {
                    y[(col.row_lo + k / cols) * cols + k % cols] += col.outscatter * v * xv;
                }
            }
        }
        Ok(y)
    }

    /// Applies the operator to every time slice of a transient.
    ///
    /// Slices are first expressed in an orthonormal basis found by
    /// Gram-Schmidt, so piecewise-constant scenes cost one convolution per
    /// basis vector rather than per bin.
    pub fn apply_transient(&self, x: &IdealTransient) -> Result<IdealTransient> {
        x.check_dims(self.rows, self.cols, x.bins)?;
        let (m, t) = (x.pixels(), x.bins);
        let slice = |ti: usize| -> Vec<f64> { (0..m).map(|p| x.flux[p * t + ti]).collect() };
        let scale = (0..t).map(|ti| norm(&slice(ti))).fold(0.0f64, f64::max);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(t);
        let mut low_rank = scale > 0.0;
        if low_rank {
            for ti in 0..t {
                let mut v = slice(ti);
                let mut c = vec![0.0; basis.len()];
                for _ in 0..2 {
                    for (j, q) in basis.iter().enumerate() {
                        let d = dot(q, &v);
                        c[j] += d;
                        for (vi, qi) in v.iter_mut().zip(q) {
                            *vi -= d * qi;
                        }
                    }
                }
                let nv = norm(&v);
                if nv > 1e-12 * scale {
                    for vi in v.iter_mut() {
                        *vi /= nv;
                    }
                    basis.push(v);
                    c.push(nv);
                }
                coefs.push(c);
                if basis.len() > MAX_SLICE_RANK {
                    low_rank = false;
                    break;
                }
            }
        }
        let retained = self.retained();
        let mut out = IdealTransient::zeros(self.rows, self.cols, t);
        for p in 0..m {
            for ti in 0..t {
                out.flux[p * t + ti] = retained[p] * x.flux[p * t + ti];
            }
        }
        if scale == 0.0 {
            return Ok(out);
        }
        if low_rank {
            log::debug!("glare applied through a {}-vector slice basis", basis.len());
            let glare = self.glare_maps(&basis)?;
            for (ti, c) in coefs.iter().enumerate() {
                for (j, cj) in c.iter().enumerate() {
                    if *cj == 0.0 {
                        continue;
                    }
                    for p in 0..m {
                        out.flux[p * t + ti] += cj * glare[j][p];
                    }
                }
            }
        } else {
            log::info!("transient slices are not low rank, applying glare slice by slice");
            const CHUNK: usize = 16;
            for t0 in (0..t).step_by(CHUNK) {
                let slices: Vec<Vec<f64>> = (t0..(t0 + CHUNK).min(t)).map(slice).collect();
                for (k, g) in self.glare_maps(&slices)?.into_iter().enumerate() {
                    for p in 0..m {
                        out.flux[p * t + t0 + k] += g[p];
                    }
                }
            }
        }
        for v in out.flux.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dst += w * src`, with a wider instruction set when available.
fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
    #[inline(always)]
    fn plain(dst: &mut [f64], src: &[f64], w: f64) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn wide(dst: &mut [f64], src: &[f64], w: f64) {
            plain(dst, src, w)
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature set.
            unsafe { wide(dst, src, w) };
            return;
        }
    }
    plain(dst, src, w)
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
