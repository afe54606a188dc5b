use crate::error::{Error, Result};

/// Transmitted pulse shape over one repetition period.
///
/// The shape is circular with its origin at bin 0, so the pulse emitted at
/// depth `d` occupies bins `d + k` for the nonzero taps `k`. Entries are
/// nonnegative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    shape: Vec<f64>,
    taps: Vec<(isize, f64)>,
}

impl Waveform {
    pub fn from_shape(shape: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Input("waveform has no bins".into()));
        }
        if shape.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(
                "waveform entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = shape.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input("waveform has zero energy".into()));
        }
        let shape: Vec<f64> = shape.into_iter().map(|v| v / total).collect();
        let n = shape.len() as isize;
        let mut taps: Vec<(isize, f64)> = shape
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| {
                let i = i as isize;
                let k = if i > n / 2 { i - n } else { i };
                (k, *v)
            })
            .collect();
        taps.sort_by_key(|t| t.0);
        Ok(Self { shape, taps })
    }

    /// Pulse samples listed in time order; the largest sample becomes the origin.
    pub fn from_samples(samples: &[f64], bins: usize) -> Result<Self> {
        if samples.len() > bins {
            return Err(Error::Input(format!(
                "waveform has {} samples but the histogram has {bins} bins",
                samples.len()
            )));
        }
        let peak = samples
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, v)| {
                if *v > acc.1 {
                    (i, *v)
                } else {
                    acc
                }
            })
            .0;
        let mut shape = vec![0.0; bins];
        for (i, v) in samples.iter().enumerate() {
            let k = i as isize - peak as isize;
            shape[k.rem_euclid(bins as isize) as usize] = *v;
        }
        Self::from_shape(shape)
    }

    /// Gaussian pulse with the given full width at half maximum, truncated at 3.5 sigma.
    pub fn gaussian(bins: usize, fwhm_bins: f64) -> Result<Self> {
        if !(fwhm_bins > 0.0) {
            return Err(Error::Input("pulse width must be positive".into()));
        }
        let sigma = fwhm_bins / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let reach = (3.5 * sigma).floor() as isize;
        let mut shape = vec![0.0; bins];
        for k in -reach..=reach {
            let v = (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp();
            shape[k.rem_euclid(bins as isize) as usize] += v;
        }
        Self::from_shape(shape)
    }

    /// Unit impulse at the origin.
    pub fn impulse(bins: usize) -> Self {
        let mut shape = vec![0.0; bins];
        shape[0] = 1.0;
        Self::from_shape(shape).expect("impulse is a valid waveform")
    }

    /// Flat pulse covering `width` bins starting at the origin.
    pub fn rectangular(bins: usize, width: usize) -> Result<Self> {
        if width == 0 || width > bins {
            return Err(Error::Input("rectangular pulse width out of range".into()));
        }
        let mut shape = vec![0.0; bins];
        for v in shape.iter_mut().take(width) {
            *v = 1.0;
        }
        Self::from_shape(shape)
    }

    pub fn bins(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[f64] {
        &self.shape
    }

    /// Nonzero samples as `(offset, value)` with offsets in `(-T/2, T/2]`, sorted by offset.
    pub fn taps(&self) -> &[(isize, f64)] {
        &self.taps
    }

    pub fn at(&self, offset: isize) -> f64 {
        self.shape[offset.rem_euclid(self.shape.len() as isize) as usize]
    }

    /// Adds `scale` times the pulse delayed by a possibly fractional `depth`,
    /// splitting each tap linearly over the two neighbouring bins.
    pub fn render_into(&self, out: &mut [f64], depth: f64, scale: f64) {
        let n = out.len() as isize;
        let base = depth.floor();
        let frac = depth - base;
        let base = base as isize;
        for &(k, v) in &self.taps {
            let i0 = (base + k).rem_euclid(n) as usize;
            out[i0] += (1.0 - frac) * scale * v;
            if frac > 0.0 {
                let i1 = (base + k + 1).rem_euclid(n) as usize;
                out[i1] += frac * scale * v;
            }
        }
    }

    /// Full width at half maximum in bins, from linear interpolation of the
    /// half-maximum crossings on either side of the peak.
    pub fn fwhm(&self) -> f64 {
        let Some(&(peak_at, peak)) = self.taps.iter().max_by(|a, b| a.1.total_cmp(&b.1)) else {
            return 0.0;
        };
        let half = peak / 2.0;
        let crossing = |dir: isize| -> f64 {
            let mut k = peak_at;
            for _ in 0..self.shape.len() {
                let v = self.at(k + dir);
                if v < half {
                    let vk = self.at(k);
                    return (k - peak_at) as f64 + dir as f64 * (vk - half) / (vk - v);
                }
                k += dir;
            }
            (k - peak_at) as f64
        };
        crossing(1) - crossing(-1)
    }

    /// Stable identifier of the pulse shape, used to tag lookup tables.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.shape {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
