//! Flat `key = value` run configuration.

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::deglare::GlareSource;
use crate::error::{Error, Result};
use crate::metrics::MissingPolicy;
use crate::pileup::IntensityEstimator;
use crate::sensor::{SensorConfig, SPEED_OF_LIGHT};

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("rows", "sensor rows"),
    ("cols", "sensor columns"),
    ("bins", "histogram bins per pixel"),
    ("bin_width", "seconds per bin"),
    ("dead_time", "dead time in bins"),
    ("pulses_per_frame", "laser pulses per frame"),
    ("clip_limit", "per-bin counter limit"),
    (
        "range_per_bin",
        "meters per bin (derived from bin_width when unset)",
    ),
    ("waveform", "pulse shape file, one sample per line"),
    (
        "waveform_fwhm",
        "FWHM in bins of the Gaussian pulse used without a waveform file",
    ),
    ("atlas", "glare atlas file (GSFA)"),
    ("luts", "pileup lookup table file (PLUT)"),
    ("truth", "ground-truth depth map (DPTH)"),
    ("k_echoes", "echoes kept per pixel"),
    ("fit_window_bins", "moment window length in bins"),
    ("min_sep_bins", "minimum separation between echoes in bins"),
    (
        "noise_window",
        "background bins: a count N for the last N bins or a range a..b",
    ),
    (
        "center_offset",
        "shift of the moment window relative to the peak, in bins",
    ),
    (
        "bg_floor_photons",
        "floor on background photons over the noise window",
    ),
    (
        "band_rows",
        "rows of the line-scan glare band, 0 for a flash sensor",
    ),
    ("decay_w", "distance weighting rate per pixel"),
    ("decay_sign", "sign of the distance weighting exponent"),
    (
        "pileup_threshold_per_pulse",
        "counts per pulse above which pileup correction applies",
    ),
    ("sigmoid_T", "temperature of the fallback sigmoid"),
    ("five_sigma_gate", "background gate in standard deviations"),
    ("conf_cap", "confidence assigned when no glare is expected"),
    (
        "confidence_background",
        "include expected background in the glare probability (true/false)",
    ),
    ("glare_source", "aggressor intensity: corrected or detected"),
    (
        "aggressor_floor",
        "minimum glare in photons an echo must cast to act as aggressor",
    ),
    ("estimator", "pileup inversion: auto, energy or variance"),
    (
        "sub_bin_refinement",
        "refine pileup estimates with the forward model at each echo's depth (true or false)",
    ),
    ("seed", "random seed"),
    ("frames", "frames accumulated per cube"),
    (
        "ghost_depth",
        "depth in meters counted as ghost during evaluation",
    ),
    ("ghost_tolerance", "ghost depth tolerance in meters"),
    (
        "delta_thresholds",
        "comma separated percentages for the delta metrics",
    ),
    (
        "missing_depth",
        "no-return policy: exclude or a penalty depth in meters",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sensor: SensorConfig,
    pub waveform: Option<PathBuf>,
    pub waveform_fwhm: f64,
    pub atlas: Option<PathBuf>,
    pub luts: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub k_echoes: usize,
    /// `None` means twice the pulse FWHM.
    pub fit_window_bins: Option<f64>,
    /// `None` means the fitting window.
    pub min_sep_bins: Option<usize>,
    pub noise_window: NoiseWindow,
    pub center_offset: f64,
    pub bg_floor_photons: f64,
    pub band_rows: usize,
    pub decay_w: f64,
    pub decay_sign: f64,
    pub pileup_threshold_per_pulse: f64,
    pub sigmoid_t: f64,
    pub five_sigma_gate: f64,
    pub conf_cap: f64,
    pub confidence_background: bool,
    pub glare_source: GlareSource,
    pub aggressor_floor: f64,
    pub estimator: IntensityEstimator,
    pub sub_bin_refinement: bool,
    pub seed: u64,
    pub frames: u64,
    pub ghost_depth: Option<f64>,
    pub ghost_tolerance: Option<f64>,
    pub delta_thresholds: Vec<u32>,
    pub missing_depth: MissingPolicy,
    range_per_bin_set: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseWindow {
    Last(usize),
    Bins(Range<usize>),
}

impl NoiseWindow {
    pub fn resolve(&self, bins: usize) -> Range<usize> {
        match self {
            NoiseWindow::Last(n) => bins.saturating_sub(*n)..bins,
            NoiseWindow::Bins(r) => r.clone(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            waveform: None,
            waveform_fwhm: 10.0,
            atlas: None,
            luts: None,
            truth: None,
            k_echoes: 3,
            fit_window_bins: None,
            min_sep_bins: None,
            noise_window: NoiseWindow::Last(557),
            center_offset: 0.0,
            bg_floor_photons: 53.0,
            band_rows: 17,
            decay_w: 0.01,
            decay_sign: -1.0,
            pileup_threshold_per_pulse: 0.05,
            sigmoid_t: 90.0,
            five_sigma_gate: 5.0,
            conf_cap: 1e6,
            confidence_background: true,
            glare_source: GlareSource::CorrectedIntensity,
            aggressor_floor: 1.0,
            estimator: IntensityEstimator::Auto,
            sub_bin_refinement: true,
            seed: 0,
            frames: 1,
            ghost_depth: None,
            ghost_tolerance: None,
            delta_thresholds: vec![1, 5, 25],
            missing_depth: MissingPolicy::Exclude,
            range_per_bin_set: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a valid value for {key}"))
}

fn positive<T: std::str::FromStr + PartialOrd + Default>(
    key: &str,
    v: &str,
) -> std::result::Result<T, String> {
    let x: T = num(key, v)?;
    if x > T::default() {
        Ok(x)
    } else {
        Err(format!("{key} must be positive, got {v}"))
    }
}

fn nonneg(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!(
            "{key} must be a finite nonnegative number, got {v}"
        ))
    }
}

impl RunConfig {
    /// Applies one setting; relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        self.apply(key, value.trim(), base).map_err(Error::Config)
    }

    fn apply(
        &mut self,
        key: &str,
        v: &str,
        base: Option<&Path>,
    ) -> std::result::Result<(), String> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let s = &mut self.sensor;
        match key {
            "rows" => s.rows = positive(key, v)?,
            "cols" => s.cols = positive(key, v)?,
            "bins" => s.bins = positive(key, v)?,
            "bin_width" => {
                s.bin_width = positive(key, v)?;
                if !self.range_per_bin_set {
                    s.range_per_bin = SPEED_OF_LIGHT * s.bin_width / 2.0;
                }
            }
            "dead_time" => s.dead_time = num(key, v)?,
            "pulses_per_frame" => s.pulses_per_frame = positive(key, v)?,
            "clip_limit" => s.clip_limit = positive(key, v)?,
            "range_per_bin" => {
                s.range_per_bin = positive(key, v)?;
                self.range_per_bin_set = true;
            }
            "waveform" => self.waveform = Some(path(v)),
            "waveform_fwhm" => self.waveform_fwhm = positive(key, v)?,
            "atlas" => self.atlas = Some(path(v)),
            "luts" => self.luts = Some(path(v)),
            "truth" => self.truth = Some(path(v)),
            "k_echoes" => self.k_echoes = positive(key, v)?,
            "fit_window_bins" => self.fit_window_bins = Some(positive(key, v)?),
            "min_sep_bins" => self.min_sep_bins = Some(positive(key, v)?),
            "noise_window" => {
                self.noise_window = match v.split_once("..") {
                    Some((a, b)) => {
                        let (a, b): (usize, usize) = (num(key, a.trim())?, num(key, b.trim())?);
                        if a >= b {
                            return Err(format!("noise_window {v} is empty"));
                        }
                        NoiseWindow::Bins(a..b)
                    }
                    None => NoiseWindow::Last(positive(key, v)?),
                }
            }
            "center_offset" => self.center_offset = num(key, v)?,
            "bg_floor_photons" => self.bg_floor_photons = nonneg(key, v)?,
            "band_rows" => self.band_rows = num(key, v)?,
            "decay_w" => self.decay_w = nonneg(key, v)?,
            "decay_sign" => {
                let x: f64 = num(key, v)?;
                if x != 1.0 && x != -1.0 {
                    return Err(format!("decay_sign must be 1 or -1, got {v}"));
                }
                self.decay_sign = x;
            }
            "pileup_threshold_per_pulse" => self.pileup_threshold_per_pulse = nonneg(key, v)?,
            "sigmoid_T" => self.sigmoid_t = positive(key, v)?,
            "five_sigma_gate" => self.five_sigma_gate = nonneg(key, v)?,
            "conf_cap" => self.conf_cap = nonneg(key, v)?,
            "confidence_background" => self.confidence_background = num(key, v)?,
            "glare_source" => {
                self.glare_source = match v {
                    "corrected" => GlareSource::CorrectedIntensity,
                    "detected" => GlareSource::DetectedEquivalent,
                    _ => {
                        return Err(format!(
                            "glare_source must be corrected or detected, got {v}"
                        ))
                    }
                }
            }
            "aggressor_floor" => self.aggressor_floor = nonneg(key, v)?,
            "estimator" => {
                self.estimator = match v {
                    "auto" => IntensityEstimator::Auto,
                    "energy" => IntensityEstimator::Energy,
                    "variance" => IntensityEstimator::Variance,
                    _ => {
                        return Err(format!(
                            "estimator must be auto, energy or variance, got {v}"
                        ))
                    }
                }
            }
            "sub_bin_refinement" => self.sub_bin_refinement = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "frames" => self.frames = positive(key, v)?,
            "ghost_depth" => self.ghost_depth = Some(positive(key, v)?),
            "ghost_tolerance" => self.ghost_tolerance = Some(nonneg(key, v)?),
            "delta_thresholds" => {
                let t: std::result::Result<Vec<u32>, String> =
                    v.split(',').map(|x| positive(key, x.trim())).collect();
                self.delta_thresholds = t?;
            }
            "missing_depth" => {
                self.missing_depth = match v {
                    "exclude" => MissingPolicy::Exclude,
                    _ => MissingPolicy::Penalize(nonneg(key, v)?),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a configuration file body on top of the defaults.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text, base)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        let mut offset = 0usize;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("");
            if body.trim().is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::format(
                    "config",
                    start as u64,
                    format!("expected `key = value`, got `{}`", body.trim()),
                ));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::format(
                    "config",
                    start as u64,
                    format!("malformed key `{key}`"),
                ));
            }
            self.set(key, value, base)
                .map_err(|e| Error::format("config", start as u64, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let nw = self.noise_window.resolve(self.sensor.bins);
        if nw.is_empty() || nw.end > self.sensor.bins {
            return Err(Error::Config(format!(
                "noise window {nw:?} is outside 0..{}",
                self.sensor.bins
            )));
        }
        Ok(())
    }

    /// The band extent handed to the glare atlas.
    pub fn band(&self) -> Option<usize> {
        (self.band_rows > 0).then_some(self.band_rows)
    }
}
