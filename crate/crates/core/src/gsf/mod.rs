//! Glare spread functions: calibration maps, interpolation and banding.

mod operator;

pub use operator::{GlareColumn, GlareOperator};

use crate::error::{Error, Result};

/// Photon counts recorded across the sensor while a single pixel is lit.
#[derive(Debug, Clone, PartialEq)]
pub struct GsfMeasurement {
    pub rows: usize,
    pub cols: usize,
    pub source: (usize, usize),
    pub raw_map: Vec<f64>,
    pub total: f64,
}

impl GsfMeasurement {
    /// The source is taken to be the brightest pixel.
    pub fn new(rows: usize, cols: usize, raw_map: Vec<f64>) -> Result<Self> {
        if raw_map.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "map has {} entries, expected {rows}x{cols}",
                raw_map.len()
            )));
        }
        if raw_map.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(
                "glare map entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = raw_map.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateGsf("glare map has no photons".into()));
        }
        let idx = raw_map
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > raw_map[best] { i } else { best });
        Ok(Self {
            rows,
            cols,
            source: (idx / cols, idx % cols),
            raw_map,
            total,
        })
    }
}

/// Spread map of the light that leaves its source pixel; zero at the source and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGsf {
    pub rows: usize,
    pub cols: usize,
    pub source: (usize, usize),
    pub map: Vec<f64>,
    /// Fraction of the source's light scattered to other pixels.
    pub outscatter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsfAtlas {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<NormalizedGsf>,
    /// Rows of the line-scan band kept around an aggressor; `None` for flash sensors.
    pub band_rows: Option<usize>,
    pub decay_w: f64,
    pub decay_sign: f64,
}

impl GsfAtlas {
    pub fn new(rows: usize, cols: usize, entries: Vec<NormalizedGsf>) -> Result<Self> {
        let atlas = Self {
            rows,
            cols,
            entries,
            band_rows: Some(17),
            decay_w: 0.01,
            decay_sign: -1.0,
        };
        atlas.validate()?;
        Ok(atlas)
    }

    pub fn with_band(mut self, band_rows: Option<usize>) -> Self {
        self.band_rows = band_rows;
        self
    }

    pub fn with_decay(mut self, w: f64, sign: f64) -> Self {
        self.decay_w = w;
        self.decay_sign = sign;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("glare atlas has no entries".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if (e.rows, e.cols) != (self.rows, self.cols) {
                return Err(Error::Dimension(format!(
                    "atlas entry {i} is {}x{}, atlas is {}x{}",
                    e.rows, e.cols, self.rows, self.cols
                )));
            }
            if e.source.0 >= self.rows || e.source.1 >= self.cols {
                return Err(Error::Config(format!(
                    "atlas entry {i} has its source off the sensor"
                )));
            }
            if self.entries[..i].iter().any(|o| o.source == e.source) {
                return Err(Error::Config(format!(
                    "atlas has two entries at {:?}",
                    e.source
                )));
            }
        }
        if self.band_rows == Some(0) {
            return Err(Error::Config("band_rows must be at least 1".into()));
        }
        if !(self.decay_w >= 0.0) || (self.decay_sign != 1.0 && self.decay_sign != -1.0) {
            return Err(Error::Config(
                "decay_w must be nonnegative and decay_sign +1 or -1".into(),
            ));
        }
        Ok(())
    }

    /// Interpolation weights of the entries for a pixel, summing to one.
    pub fn weights(&self, pos: (usize, usize)) -> Vec<(usize, f64)> {
        if let Some(i) = self.entries.iter().position(|e| e.source == pos) {
            return vec![(i, 1.0)];
        }
        let raw: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let dr = e.source.0 as f64 - pos.0 as f64;
                let dc = e.source.1 as f64 - pos.1 as f64;
                1.0 / (dr * dr + dc * dc)
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter()
            .enumerate()
            .map(|(i, w)| (i, w / s))
            .collect()
    }
}

pub fn normalize_gsf(meas: &GsfMeasurement) -> Result<NormalizedGsf> {
    let (sr, sc) = meas.source;
    let a0 = meas.raw_map[sr * meas.cols + sc];
    let outscatter = 1.0 - a0 / meas.total;
    if !(outscatter > 0.0) {
        return Err(Error::DegenerateGsf(format!(
            "all light stays at the source pixel {:?}",
            meas.source
        )));
    }
    let scale = 1.0 / (outscatter * meas.total);
    let mut map: Vec<f64> = meas.raw_map.iter().map(|a| a * scale).collect();
    map[sr * meas.cols + sc] = 0.0;
    Ok(NormalizedGsf {
        rows: meas.rows,
        cols: meas.cols,
        source: meas.source,
        map,
        outscatter,
    })
}

fn renormalize(map: &mut [f64]) -> f64 {
    let s: f64 = map.iter().sum();
    if s > 0.0 {
        for v in map.iter_mut() {
            *v /= s;
        }
    }
    s
}

/// Scales each entry by `exp(sign * w * distance to the source)` and renormalizes.
pub fn distance_weight(gsf: &NormalizedGsf, w: f64, sign: f64) -> Result<NormalizedGsf> {
    if !(w >= 0.0) {
        return Err(Error::Input(format!(
            "distance coefficient {w} must be nonnegative"
        )));
    }
    let mut out = gsf.clone();
    if w == 0.0 {
        return Ok(out);
    }
    let (sr, sc) = (gsf.source.0 as f64, gsf.source.1 as f64);
    for r in 0..gsf.rows {
        for c in 0..gsf.cols {
            let d = (r as f64 - sr).hypot(c as f64 - sc);
            out.map[r * gsf.cols + c] *= (sign * w * d).exp();
        }
    }
    if renormalize(&mut out.map) <= 0.0 {
        return Err(Error::DegenerateGsf(
            "distance weighting removed all mass".into(),
        ));
    }
    Ok(out)
}

/// Value of `map` at a possibly out-of-bounds position, continuing each edge
/// pixel outward with the distance-dependent exponential.
pub fn extrapolated_value(
    map: &[f64],
    rows: usize,
    cols: usize,
    r: isize,
    c: isize,
    w: f64,
    sign: f64,
) -> f64 {
    let rc = r.clamp(0, rows as isize - 1);
    let cc = c.clamp(0, cols as isize - 1);
    let v = map[rc as usize * cols + cc as usize];
    if rc == r && cc == c {
        return v;
    }
    let d = ((r - rc) as f64).hypot((c - cc) as f64);
    v * (sign * w * d).exp()
}

/// Pads a map by `pad` pixels on every side. Returns the padded map, row-major
/// with `rows + 2 * pad` rows and `cols + 2 * pad` columns.
pub fn pad_extrapolate(
    map: &[f64],
    rows: usize,
    cols: usize,
    pad: usize,
    w: f64,
    sign: f64,
) -> Vec<f64> {
    let (pr, pc) = (rows + 2 * pad, cols + 2 * pad);
    let mut out = Vec::with_capacity(pr * pc);
    for r in 0..pr {
        for c in 0..pc {
            out.push(extrapolated_value(
                map,
                rows,
                cols,
                r as isize - pad as isize,
                c as isize - pad as isize,
                w,
                sign,
            ));
        }
    }
    out
}

/// Blend of the atlas entries recentered on `pos`, weighted by inverse squared
/// distance between `pos` and each entry's source.
pub fn interpolate_gsf(atlas: &GsfAtlas, pos: (usize, usize)) -> Result<NormalizedGsf> {
    atlas.validate()?;
    let (rows, cols) = (atlas.rows, atlas.cols);
    if pos.0 >= rows || pos.1 >= cols {
        return Err(Error::Config(format!(
            "position {pos:?} is outside the sensor"
        )));
    }
    let weights = atlas.weights(pos);
    if let [(i, _)] = weights[..] {
        if atlas.entries[i].source == pos {
            return Ok(atlas.entries[i].clone());
        }
    }
    let mut map = vec![0.0; rows * cols];
    let mut outscatter = 0.0;
    for (i, wi) in weights {
        let e = &atlas.entries[i];
        outscatter += wi * e.outscatter;
        let dr = e.source.0 as isize - pos.0 as isize;
        let dc = e.source.1 as isize - pos.1 as isize;
        for r in 0..rows {
            for c in 0..cols {
                map[r * cols + c] += wi
                    * extrapolated_value(
                        &e.map,
                        rows,
                        cols,
                        r as isize + dr,
                        c as isize + dc,
                        atlas.decay_w,
                        atlas.decay_sign,
                    );
            }
        }
    }
    map[pos.0 * cols + pos.1] = 0.0;
    if renormalize(&mut map) <= 0.0 {
        return Err(Error::DegenerateGsf(format!("no glare mass at {pos:?}")));
    }
    Ok(NormalizedGsf {
        rows,
        cols,
        source: pos,
        map,
        outscatter,
    })
}

/// Rows `[r - (band-1)/2, r + band - 1 - (band-1)/2]` around the aggressor row.
pub fn band_extent(band_rows: usize) -> (usize, usize) {
    let above = (band_rows - 1) / 2;
    (above, band_rows - 1 - above)
}

/// Zeroes rows outside the band centered on `aggressor_row` and renormalizes.
pub fn apply_band_mask(
    map: &[f64],
    rows: usize,
    cols: usize,
    aggressor_row: isize,
    band_rows: usize,
) -> Result<Vec<f64>> {
    if band_rows == 0 {
        return Err(Error::Config("band_rows must be at least 1".into()));
    }
    let (above, below) = band_extent(band_rows);
    let lo = (aggressor_row - above as isize).max(0);
    let hi = (aggressor_row + below as isize).min(rows as isize - 1);
    if lo > hi {
        return Err(Error::EmptyMask(format!(
            "band around row {aggressor_row} misses the sensor"
        )));
    }
    let mut out = vec![0.0; map.len()];
    let (lo, hi) = (lo as usize, hi as usize);
    out[lo * cols..(hi + 1) * cols].copy_from_slice(&map[lo * cols..(hi + 1) * cols]);
    if renormalize(&mut out) <= 0.0 {
        return Err(Error::EmptyMask(format!(
            "no glare mass inside the band around row {aggressor_row}"
        )));
    }
    Ok(out)
}
