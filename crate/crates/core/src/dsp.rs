use std::ops::Range;

use rayon::prelude::*;

use crate::cube::HistogramCube;
use crate::error::{Error, Result};
use crate::waveform::Waveform;

/// One detected return in a pixel's histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Echo {
    pub row: usize,
    pub col: usize,
    pub peak_bin: usize,
    /// Matched-filter response at the peak.
    pub peak_height: f64,
    /// Photons inside the fitting window.
    pub counts: f64,
    /// Count-weighted mean bin inside the window.
    pub mean_tof: f64,
    /// Count-weighted bin variance inside the window.
    pub var_tof: f64,
    /// Background photons per bin after the floor is applied.
    pub background: f64,
    /// Background photons per bin as measured in the noise window.
    pub background_raw: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoSet {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub pulses: u64,
    /// Per pixel, row-major; echoes sorted by descending peak height.
    pub echoes: Vec<Vec<Echo>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DspParams {
    pub k: usize,
    /// Fitting window length in bins.
    pub window: f64,
    pub min_sep: usize,
    pub noise_window: Range<usize>,
    /// Background floor in photons over the whole noise window.
    pub bg_floor: f64,
    /// Constant shift of the window center relative to the refined peak.
    pub center_offset: f64,
}

impl DspParams {
    /// Defaults for a sensor with `bins` bins and a pulse of the given FWHM.
    pub fn for_sensor(bins: usize, fwhm: f64) -> Self {
        let window = (2.0 * fwhm).round().max(1.0);
        Self {
            k: 3,
            window,
            min_sep: window as usize,
            noise_window: bins.saturating_sub(557)..bins,
            bg_floor: 53.0,
            center_offset: 0.0,
        }
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k_echoes must be at least 1".into()));
        }
        if !(self.window >= 1.0) || self.window > bins as f64 {
            return Err(Error::Config(format!(
                "fitting window {} must lie in [1, {bins}]",
                self.window
            )));
        }
        if self.noise_window.is_empty() || self.noise_window.end > bins {
            return Err(Error::Config(format!(
                "noise window {:?} must be non-empty and inside 0..{bins}",
                self.noise_window
            )));
        }
        if self.bg_floor < 0.0 {
            return Err(Error::Config("bg_floor_photons must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub counts: f64,
    pub mean: f64,
    pub var: f64,
    pub degenerate: bool,
}

/// Circular cross-correlation with a fixed pulse replica.
#[derive(Debug, Clone)]
pub struct MatchedFilter {
    bins: usize,
    first: isize,
    span: usize,
    taps: Vec<(usize, f32)>,
    taps64: Vec<(usize, f64)>,
}

impl MatchedFilter {
    pub fn new(wf: &Waveform) -> Self {
        let bins = wf.bins();
        let first = wf.taps().first().map(|t| t.0).unwrap_or(0);
        let last = wf.taps().last().map(|t| t.0).unwrap_or(0);
        let taps = wf
            .taps()
            .iter()
            .map(|&(k, v)| ((k - first) as usize, v as f32))
            .collect();
        let taps64 = wf
            .taps()
            .iter()
            .map(|&(k, v)| ((k - first) as usize, v))
            .collect();
        Self {
            bins,
            first,
            span: (last - first) as usize,
            taps,
            taps64,
        }
    }

    /// `out[d] = sum_k w[k] * hist[(d + k) mod T]`.
    pub fn apply(&self, hist: &[f32], scratch: &mut Vec<f32>, out: &mut [f32]) {
        let n = self.bins;
        debug_assert_eq!(hist.len(), n);
        scratch.clear();
        let need = n + self.span;
        let mut start = self.first.rem_euclid(n as isize) as usize;
        while scratch.len() < need {
            let take = (n - start).min(need - scratch.len());
            scratch.extend_from_slice(&hist[start..start + take]);
            start = 0;
        }
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the CPU supports the enabled feature set.
                unsafe { correlate_avx2(&self.taps, scratch, out) };
                return;
            }
        }
        correlate(&self.taps, scratch, out);
    }

    /// Double precision variant for noiseless model curves.
    pub fn apply_f64(&self, hist: &[f64]) -> Vec<f64> {
        let n = self.bins;
        let ext: Vec<f64> = (0..n + self.span)
            .map(|j| hist[(j as isize + self.first).rem_euclid(n as isize) as usize])
            .collect();
        let mut out = vec![0.0; n];
        for &(k, w) in &self.taps64 {
            for (o, h) in out.iter_mut().zip(&ext[k..k + n]) {
                *o += w * h;
            }
        }
        out
    }
}

/// Register-blocked correlation. `mul_add` rounds once whichever instruction
/// set runs it, so the vectorized and portable paths agree exactly.
#[inline(always)]
fn correlate(taps: &[(usize, f32)], ext: &[f32], out: &mut [f32]) {
    const B: usize = 16;
    let mut chunks = out.chunks_exact_mut(B);
    let mut d = 0;
    let span = taps.last().map_or(0, |t| t.0);
    for chunk in &mut chunks {
        // Two interleaved accumulator sets shorten the dependency chains.
        let (mut even, mut odd) = ([0f32; B], [0f32; B]);
        let window = &ext[d..d + span + B];
        let mut pairs = taps.chunks_exact(2);
        for pair in &mut pairs {
            let (k0, w0) = pair[0];
            let (k1, w1) = pair[1];
            let a = &window[k0..k0 + B];
            let b = &window[k1..k1 + B];
            for j in 0..B {
                even[j] = w0.mul_add(a[j], even[j]);
                odd[j] = w1.mul_add(b[j], odd[j]);
            }
        }
        if let [(k, w)] = pairs.remainder() {
            let a = &window[*k..*k + B];
            for j in 0..B {
                even[j] = w.mul_add(a[j], even[j]);
            }
        }
        for j in 0..B {
            chunk[j] = even[j] + odd[j];
        }
        d += B;
    }
    for (j, o) in chunks.into_remainder().iter_mut().enumerate() {
        let mut acc = 0f32;
        for &(k, w) in taps {
            acc = w.mul_add(ext[d + j + k], acc);
        }
        *o = acc;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx2(taps: &[(usize, f32)], ext: &[f32], out: &mut [f32]) {
    correlate(taps, ext, out)
}

pub fn matched_filter(hist: &[f64], wf: &Waveform) -> Vec<f64> {
    MatchedFilter::new(wf).apply_f64(hist)
}

fn circular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// Greedy selection of up to `k` local maxima above `gate`, highest first,
/// keeping accepted peaks at least `min_sep` bins apart (circularly).
pub fn find_peaks<T: Copy + Into<f64>>(
    filtered: &[T],
    k: usize,
    min_sep: usize,
    gate: f64,
) -> Vec<usize> {
    let n = filtered.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let at = |i: usize| -> f64 { filtered[i].into() };
    // Branch-free scan: noisy histograms make local-maximum tests unpredictable.
    let mut slots = vec![0usize; n + 1];
    let mut m = 0;
    let mut prev = at(n - 1);
    let mut v = at(0);
    for i in 0..n {
        let next = at(if i + 1 == n { 0 } else { i + 1 });
        slots[m] = i;
        m += ((v > gate) & (v >= prev) & (v > next)) as usize;
        prev = v;
        v = next;
    }
    let cands = slots[..m].iter().map(|&i| (i, at(i))).collect();
    select_peaks(cands, k, min_sep, n)
}

/// Repeated selection of the best remaining candidate; ties go to the lower
/// bin, matching a stable descending sort.
fn select_peaks(mut cands: Vec<(usize, f64)>, k: usize, min_sep: usize, n: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    while picked.len() < k {
        let mut best: Option<usize> = None;
        for (j, &(i, v)) in cands.iter().enumerate() {
            let better = best.is_none_or(|b| v > cands[b].1 || (v == cands[b].1 && i < cands[b].0));
            if better
                && picked
                    .iter()
                    .all(|&p| circular_distance(p, i, n) >= min_sep)
            {
                best = Some(j);
            }
        }
        match best {
            Some(b) => {
                picked.push(cands[b].0);
                cands.swap_remove(b);
            }
            None => break,
        }
    }
    picked
}

/// Same result as `find_peaks` on single precision input, with a vectorized scan.
fn find_peaks_f32(
    f: &[f32],
    k: usize,
    min_sep: usize,
    gate: f64,
    mask: &mut Vec<u8>,
) -> Vec<usize> {
    let n = f.len();
    if n < 3 || k == 0 {
        return find_peaks(f, k, min_sep, gate);
    }
    mask.clear();
    mask.resize(n, 0);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature set.
            unsafe { maxima_mask_avx2(f, gate, mask) };
        } else {
            maxima_mask(f, gate, mask);
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    maxima_mask(f, gate, mask);
    let edge = |i: usize, prev: usize, next: usize| {
        (f[i] as f64 > gate && f[i] >= f[prev] && f[i] > f[next]) as u8
    };
    mask[0] = edge(0, n - 1, 1);
    mask[n - 1] = edge(n - 1, n - 2, 0);
    let mut cands = Vec::new();
    for (c, word) in mask.chunks(8).enumerate() {
        if word.iter().all(|b| *b == 0) {
            continue;
        }
        for (j, b) in word.iter().enumerate() {
            if *b != 0 {
                let i = c * 8 + j;
                cands.push((i, f[i] as f64));
            }
        }
    }
    select_peaks(cands, k, min_sep, n)
}

/// Largest single precision value not above `gate`, so that `v > gate`
/// exactly when `v > gate_f32(gate)` for any finite `v: f32`.
fn gate_f32(gate: f64) -> f32 {
    let g = gate as f32;
    if g as f64 > gate {
        g.next_down()
    } else {
        g
    }
}

#[inline(always)]
fn maxima_mask(f: &[f32], gate: f64, mask: &mut [u8]) {
    let gate = gate_f32(gate);
    let mid = &mut mask[1..f.len() - 1];
    for (((m, &v), &p), &q) in mid.iter_mut().zip(&f[1..]).zip(f).zip(&f[2..]) {
        *m = ((v > gate) & (v >= p) & (v > q)) as u8;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn maxima_mask_avx2(f: &[f32], gate: f64, mask: &mut [u8]) {
    maxima_mask(f, gate, mask)
}

/// Sub-bin peak position from a parabola through the peak and its neighbours.
pub fn refine_peak<T: Copy + Into<f64>>(filtered: &[T], peak: usize) -> f64 {
    let n = filtered.len();
    let y0: f64 = filtered[peak].into();
    let ym: f64 = filtered[(peak + n - 1) % n].into();
    let yp: f64 = filtered[(peak + 1) % n].into();
    let curv = ym - 2.0 * y0 + yp;
    if curv >= 0.0 {
        return peak as f64;
    }
    let delta = (0.5 * (ym - yp) / curv).clamp(-0.5, 0.5);
    peak as f64 + delta
}

/// Counts, mean and variance of bin indices over the window
/// `[center - width/2, center + width/2]`. Bin `i` spans `[i - 0.5, i + 0.5]`
/// and contributes in proportion to its overlap with the window; indices wrap
/// circularly and the mean is reported in `[0, T)`.
pub fn window_moments<T: Copy + Into<f64>>(hist: &[T], center: f64, width: f64) -> Moments {
    let n = hist.len() as isize;
    let lo = center - width / 2.0;
    let hi = center + width / 2.0;
    let first = (lo + 0.5).floor() as isize;
    let last = (hi - 0.5).ceil() as isize;
    let half = width / 2.0;
    // Offsets are taken from the window center, which keeps the one-pass
    // variance free of cancellation.
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let mut add = |i: isize, v: f64| {
        let x = i as f64 - center;
        let c = ((x + 0.5).min(half) - (x - 0.5).max(-half)).clamp(0.0, 1.0) * v;
        s0 += c;
        s1 += c * x;
        s2 += c * x * x;
    };
    if first >= 0 && last < n {
        for (i, v) in (first..=last).zip(&hist[first as usize..=last as usize]) {
            add(i, (*v).into());
        }
    } else {
        for i in first..=last {
            add(i, hist[i.rem_euclid(n) as usize].into());
        }
    }
    if s0 <= 0.0 {
        return Moments {
            counts: 0.0,
            mean: center.rem_euclid(n as f64),
            var: 0.0,
            degenerate: true,
        };
    }
    let offset = s1 / s0;
    Moments {
        counts: s0,
        mean: (center + offset).rem_euclid(n as f64),
        var: (s2 / s0 - offset * offset).max(0.0),
        degenerate: false,
    }
}

/// Moments in a window of `window` bins centered on `peak + offset`.
pub fn extract_moments<T: Copy + Into<f64>>(
    hist: &[T],
    peak: f64,
    window: f64,
    offset: f64,
) -> Result<Moments> {
    if !(window >= 1.0) {
        return Err(Error::Input(format!(
            "fitting window {window} is shorter than one bin"
        )));
    }
    let m = window_moments(hist, peak + offset, window);
    if m.degenerate {
        log::debug!("degenerate echo at bin {peak}");
        return Ok(Moments {
            mean: peak.rem_euclid(hist.len() as f64),
            ..m
        });
    }
    Ok(m)
}

/// Mean counts per bin over the noise window, not lowered below the floor.
/// The floor is given in photons over the whole noise window.
pub fn estimate_background<T: Copy + Into<f64>>(
    hist: &[T],
    noise_window: Range<usize>,
    floor: f64,
) -> Result<f64> {
    let (raw, floor_per_bin) = background_parts(hist, noise_window, floor)?;
    Ok(raw.max(floor_per_bin))
}

fn background_parts<T: Copy + Into<f64>>(
    hist: &[T],
    noise_window: Range<usize>,
    floor: f64,
) -> Result<(f64, f64)> {
    if noise_window.is_empty() || noise_window.end > hist.len() {
        return Err(Error::Input(format!(
            "noise window {noise_window:?} is empty or outside the histogram"
        )));
    }
    let len = noise_window.len() as f64;
    let raw = hist[noise_window].iter().map(|v| (*v).into()).sum::<f64>() / len;
    Ok((raw, floor / len))
}

/// Echo extraction for every pixel of a cube.
pub fn extract_echoes(cube: &HistogramCube, wf: &Waveform, params: &DspParams) -> Result<EchoSet> {
    if wf.bins() != cube.bins {
        return Err(Error::Dimension(format!(
            "waveform has {} bins, cube has {}",
            wf.bins(),
            cube.bins
        )));
    }
    params.validate(cube.bins)?;
    let mf = MatchedFilter::new(wf);
    let t = cube.bins;
    let echoes = (0..cube.pixels())
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
            |(h, f, scratch, mask), idx| {
                let counts = cube.pixel_index(idx);
                for (d, c) in h.iter_mut().zip(counts) {
                    *d = *c as f32;
                }
                pixel_echoes(
                    h,
                    f,
                    scratch,
                    mask,
                    &mf,
                    params,
                    idx / cube.cols,
                    idx % cube.cols,
                )
            },
        )
        .collect();
    Ok(EchoSet {
        rows: cube.rows,
        cols: cube.cols,
        bins: cube.bins,
        pulses: cube.pulses,
        echoes,
    })
}

/// Sum in double precision with independent partial sums; counts are
/// integers, so the result does not depend on the order.
fn sum_f32(v: &[f32]) -> f64 {
    let mut acc = [0f64; 8];
    let mut chunks = v.chunks_exact(8);
    for c in &mut chunks {
        for j in 0..8 {
            acc[j] += c[j] as f64;
        }
    }
    acc.iter().sum::<f64>() + chunks.remainder().iter().map(|x| *x as f64).sum::<f64>()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pixel_echoes(
    h: &[f32],
    f: &mut [f32],
    scratch: &mut Vec<f32>,
    mask: &mut Vec<u8>,
    mf: &MatchedFilter,
    params: &DspParams,
    row: usize,
    col: usize,
) -> Vec<Echo> {
    let nw = &params.noise_window;
    let raw = sum_f32(&h[nw.clone()]) / nw.len() as f64;
    let background = raw.max(params.bg_floor / nw.len() as f64);
    mf.apply(h, scratch, f);
    find_peaks_f32(f, params.k, params.min_sep, raw, mask)
        .into_iter()
        .map(|p| {
            let center = refine_peak(f, p);
            let m = window_moments(h, center + params.center_offset, params.window);
            Echo {
                row,
                col,
                peak_bin: p,
                peak_height: f[p] as f64,
                counts: m.counts,
                mean_tof: if m.degenerate { p as f64 } else { m.mean },
                var_tof: m.var,
                background,
                background_raw: raw,
                degenerate: m.degenerate,
            }
        })
        .collect()
}
