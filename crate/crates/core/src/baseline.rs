//! Photographic per-slice glare removal with a single shift-invariant kernel.

use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::cube::HistogramCube;
use crate::deglare::{DepthMap, SourceTag};
use crate::dsp::{pixel_echoes, DspParams, MatchedFilter};
use crate::error::{Error, Result};
use crate::fft::{good_size, Fft2};
use crate::gsf::{band_extent, GlareOperator, GsfMeasurement};
use crate::waveform::Waveform;

/// Kernels whose support fits in this many pixels per side are applied directly.
const DIRECT_SUPPORT: usize = 15;

/// Sharpening operator `(1 + a) I - a B` built from one glare measurement.
#[derive(Debug, Clone)]
pub struct SharpenOperator {
    pub rows: usize,
    pub cols: usize,
    /// Pixel of the kernel that maps onto itself.
    pub center: (usize, usize),
    /// Spread of scattered light, zero at the center and summing to one.
    pub kernel: Vec<f64>,
    pub outscatter: f64,
}

/// Per-slice bookkeeping for negative outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClampStats {
    pub clamped: usize,
    /// Magnitude of the clipped negative mass.
    pub clamped_mass: f64,
}

impl ClampStats {
    pub fn merge(self, o: ClampStats) -> ClampStats {
        ClampStats {
            clamped: self.clamped + o.clamped,
            clamped_mass: self.clamped_mass + o.clamped_mass,
        }
    }
}

pub fn decompose_gsf(meas: &GsfMeasurement) -> Result<SharpenOperator> {
    if !(meas.total > 0.0) {
        return Err(Error::DegenerateGsf(
            "glare measurement has no photons".into(),
        ));
    }
    let (rows, cols) = (meas.rows, meas.cols);
    let (sr, sc) = meas.source;
    let center = sr * cols + sc;
    let outscatter = 1.0 - meas.raw_map[center] / meas.total;
    let mut kernel: Vec<f64> = meas.raw_map.iter().map(|a| a / meas.total).collect();
    kernel[center] = 0.0;
    let s: f64 = kernel.iter().sum();
    if !(outscatter > 0.0) || !(s > 0.0) {
        log::warn!("glare measurement keeps all light at the source; sharpening is the identity");
        return Ok(SharpenOperator {
            rows,
            cols,
            center: meas.source,
            kernel: vec![0.0; rows * cols],
            outscatter: 0.0,
        });
    }
    kernel.iter_mut().for_each(|v| *v /= s);
    Ok(SharpenOperator {
        rows,
        cols,
        center: meas.source,
        kernel,
        outscatter,
    })
}

impl SharpenOperator {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            center: (rows / 2, cols / 2),
            kernel: vec![0.0; rows * cols],
            outscatter: 0.0,
        }
    }

    /// Kernel measured by lighting the central pixel through a calibrated glare operator.
    pub fn from_glare(op: &GlareOperator) -> Result<Self> {
        let (rows, cols) = (op.rows(), op.cols());
        let mut x = vec![0.0; rows * cols];
        x[(rows / 2) * cols + cols / 2] = 1.0;
        // FFT round-off can leave tiny negatives far from the source.
        let m = op.apply_map(&x)?.into_iter().map(|v| v.max(0.0)).collect();
        decompose_gsf(&GsfMeasurement::new(rows, cols, m)?)
    }

    /// Keeps only the rows a line-scanned sensor spreads glare over.
    pub fn band_limited(&self, band_rows: usize) -> Result<Self> {
        if band_rows == 0 {
            return Err(Error::Config("band_rows must be at least 1".into()));
        }
        let (above, below) = band_extent(band_rows);
        let mut out = self.clone();
        for r in 0..self.rows {
            if r + above < self.center.0 || r > self.center.0 + below {
                out.kernel[r * self.cols..(r + 1) * self.cols].fill(0.0);
            }
        }
        let s: f64 = out.kernel.iter().sum();
        if s > 0.0 {
            out.kernel.iter_mut().for_each(|v| *v /= s);
        } else {
            out.outscatter = 0.0;
        }
        Ok(out)
    }

    /// Bounding box of the nonzero kernel entries as offsets from the center.
    fn support(&self) -> Option<(isize, isize, isize, isize)> {
        let mut bb: Option<(isize, isize, isize, isize)> = None;
        for (i, v) in self.kernel.iter().enumerate() {
            if *v != 0.0 {
                let dr = (i / self.cols) as isize - self.center.0 as isize;
                let dc = (i % self.cols) as isize - self.center.1 as isize;
                bb = Some(match bb {
                    None => (dr, dr, dc, dc),
                    Some((a, b, c, d)) => (a.min(dr), b.max(dr), c.min(dc), d.max(dc)),
                });
            }
        }
        bb
    }

    fn kernel_at(&self, dr: isize, dc: isize) -> f64 {
        let r = self.center.0 as isize + dr;
        let c = self.center.1 as isize + dc;
        if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
            return 0.0;
        }
        self.kernel[r as usize * self.cols + c as usize]
    }
}

/// Spread operator bound to a slice size, with the per-source in-frame kernel mass.
pub struct SlicePlan {
    op: SharpenOperator,
    rows: usize,
    cols: usize,
    mass: Vec<f64>,
    taps: Vec<(isize, isize, f64)>,
    fft: Option<(Fft2, Vec<Complex<f64>>)>,
}

impl SlicePlan {
    pub fn new(op: &SharpenOperator, rows: usize, cols: usize) -> Self {
        let support = op.support();
        let mut taps = Vec::new();
        if let Some((r0, r1, c0, c1)) = support {
            for dr in r0..=r1 {
                for dc in c0..=c1 {
                    let v = op.kernel_at(dr, dc);
                    if v != 0.0 {
                        taps.push((dr, dc, v));
                    }
                }
            }
        }
        let (kr, kc) = (op.rows, op.cols);
        let mut sat = vec![0.0; (kr + 1) * (kc + 1)];
        for r in 0..kr {
            let mut run = 0.0;
            for c in 0..kc {
                run += op.kernel[r * kc + c];
                sat[(r + 1) * (kc + 1) + c + 1] = sat[r * (kc + 1) + c + 1] + run;
            }
        }
        let span = |p: usize, center: usize, n: usize, k: usize| -> (usize, usize) {
            let lo = (center as isize - p as isize).clamp(0, k as isize) as usize;
            let hi = (center as isize - p as isize + n as isize).clamp(0, k as isize) as usize;
            (lo, hi)
        };
        let mut mass = vec![0.0; rows * cols];
        for r in 0..rows {
            let (a0, a1) = span(r, op.center.0, rows, kr);
            for c in 0..cols {
                let (b0, b1) = span(c, op.center.1, cols, kc);
                let w = kc + 1;
                mass[r * cols + c] =
                    sat[a1 * w + b1] - sat[a0 * w + b1] - sat[a1 * w + b0] + sat[a0 * w + b0];
            }
        }
        let fft = support.and_then(|(r0, r1, c0, c1)| {
            let (hr, hc) = ((r1 - r0 + 1) as usize, (c1 - c0 + 1) as usize);
            if hr <= DIRECT_SUPPORT && hc <= DIRECT_SUPPORT {
                return None;
            }
            let (fr, fc) = (good_size(rows + hr - 1), good_size(cols + hc - 1));
            let plan = Fft2::new(fr, fc);
            let mut spec = vec![Complex::new(0.0, 0.0); fr * fc];
            for &(dr, dc, v) in &taps {
                let i = dr.rem_euclid(fr as isize) as usize;
                let j = dc.rem_euclid(fc as isize) as usize;
                spec[i * fc + j].re += v;
            }
            plan.forward(&mut spec);
            Some((plan, spec))
        });
        Self {
            op: op.clone(),
            rows,
            cols,
            mass,
            taps,
            fft,
        }
    }

    /// Scattered light arriving at each pixel, with every source's in-frame
    /// spread renormalized so that no light leaves the slice.
    pub fn spread(&self, y: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let mut out = vec![0.0; rows * cols];
        let src: Vec<f64> = y
            .iter()
            .zip(&self.mass)
            .map(|(v, m)| if *m > 0.0 { v / m } else { 0.0 })
            .collect();
        for (i, (v, m)) in y.iter().zip(&self.mass).enumerate() {
            if *m <= 0.0 {
                out[i] += v;
            }
        }
        match &self.fft {
            Some((plan, spec)) => {
                let mut buf = vec![Complex::new(0.0, 0.0); plan.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * plan.cols + c].re = src[r * cols + c];
                    }
                }
                plan.forward(&mut buf);
                for (b, s) in buf.iter_mut().zip(spec) {
                    *b *= s;
                }
                plan.inverse(&mut buf);
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] += buf[r * plan.cols + c].re;
                    }
                }
            }
            None => {
                for r in 0..rows as isize {
                    for c in 0..cols as isize {
                        let v = src[r as usize * cols + c as usize];
                        if v == 0.0 {
                            continue;
                        }
                        for &(dr, dc, k) in &self.taps {
                            let (u, w) = (r + dr, c + dc);
                            if u >= 0 && w >= 0 && u < rows as isize && w < cols as isize {
                                out[u as usize * cols + w as usize] += k * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// `(1 + a) y - a B y` before clamping.
    pub fn sharpen(&self, y: &[f64]) -> Vec<f64> {
        let a = self.op.outscatter;
        if a == 0.0 {
            return y.to_vec();
        }
        let b = self.spread(y);
        y.iter()
            .zip(&b)
            .map(|(v, s)| (1.0 + a) * v - a * s)
            .collect()
    }
}

/// Sharpens one intensity slice and clamps negative results to zero.
pub fn deglare_slice(
    slice: &[f64],
    rows: usize,
    cols: usize,
    plan: &SlicePlan,
) -> Result<(Vec<f64>, ClampStats)> {
    if slice.len() != rows * cols || (plan.rows, plan.cols) != (rows, cols) {
        return Err(Error::Dimension(format!(
            "slice of {} values does not match {rows}x{cols}",
            slice.len()
        )));
    }
    let mut out = plan.sharpen(slice);
    let mut stats = ClampStats::default();
    for v in out.iter_mut() {
        if *v < 0.0 {
            stats.clamped += 1;
            stats.clamped_mass -= *v;
            *v = 0.0;
        }
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub dsp: DspParams,
    pub five_sigma_gate: f64,
    pub range_per_bin: f64,
}

/// Sharpens every time slice, then keeps the brightest matched-filter echo per pixel.
pub fn baseline_depth(
    cube: &HistogramCube,
    op: &SharpenOperator,
    wf: &Waveform,
    params: &BaselineParams,
) -> Result<(DepthMap, ClampStats)> {
    if wf.bins() != cube.bins {
        return Err(Error::Dimension(format!(
            "waveform has {} bins, cube has {}",
            wf.bins(),
            cube.bins
        )));
    }
    params.dsp.validate(cube.bins)?;
    let (rows, cols, t) = (cube.rows, cube.cols, cube.bins);
    let plan = SlicePlan::new(op, rows, cols);
    let slices: Vec<(Vec<f64>, ClampStats)> = (0..t)
        .into_par_iter()
        .map(|k| {
            let slice: Vec<f64> = (0..rows * cols)
                .map(|p| cube.counts[p * t + k] as f64)
                .collect();
            deglare_slice(&slice, rows, cols, &plan)
        })
        .collect::<Result<_>>()?;
    let stats = slices
        .iter()
        .fold(ClampStats::default(), |s, x| s.merge(x.1));
    let mf = MatchedFilter::new(wf);
    let dsp = DspParams {
        k: 1,
        ..params.dsp.clone()
    };
    let depth: Vec<f32> = (0..rows * cols)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0f32; t],
                    vec![0f32; t],
                    Vec::with_capacity(2 * t),
                    Vec::with_capacity(t),
                )
            },
            |(h, f, scratch, mask), p| {
                for (k, d) in h.iter_mut().enumerate() {
                    *d = slices[k].0[p] as f32;
                }
                let echoes = pixel_echoes(h, f, scratch, mask, &mf, &dsp, p / cols, p % cols);
                match echoes.first() {
                    Some(e) => {
                        let eta = e.background * dsp.window;
                        if e.counts >= eta + params.five_sigma_gate * eta.sqrt() {
                            (e.mean_tof * params.range_per_bin) as f32
                        } else {
                            f32::NAN
                        }
                    }
                    None => f32::NAN,
                }
            },
        )
        .collect();
    let mut map = DepthMap::from_meters(rows, cols, depth);
    for s in map.source.iter_mut() {
        if *s == SourceTag::Clean {
            *s = SourceTag::Deglared;
        }
    }
    Ok((map, stats))
}
