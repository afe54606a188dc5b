//! Scene rendering, glare injection and SPAD histogram sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use rayon::prelude::*;

use crate::cube::{HistogramCube, IdealTransient};
use crate::error::{Error, Result};
use crate::gsf::{GlareOperator, GsfAtlas};
use crate::pileup::forward_q;
use crate::sensor::SensorConfig;
use crate::waveform::Waveform;

/// Half-open pixel rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }

    pub fn area(&self) -> usize {
        self.r1.saturating_sub(self.r0) * self.c1.saturating_sub(self.c0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetroRegion {
    pub rect: Rect,
    pub depth: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    /// Per-pixel depth in bins.
    pub depth: Vec<f64>,
    /// Per-pixel signal photons per pulse.
    pub signal_alpha: Vec<f64>,
    /// Background photons per pulse summed over all bins.
    pub background_beta: f64,
    /// Optional per-pixel background overriding `background_beta`.
    pub beta_map: Option<Vec<f64>>,
    /// Retroreflectors painted over the base maps.
    pub retro_regions: Vec<RetroRegion>,
}

impl SceneSpec {
    pub fn uniform(rows: usize, cols: usize, depth: f64, alpha: f64, beta: f64) -> Self {
        Self {
            rows,
            cols,
            depth: vec![depth; rows * cols],
            signal_alpha: vec![alpha; rows * cols],
            background_beta: beta,
            beta_map: None,
            retro_regions: Vec::new(),
        }
    }

    pub fn fill_rect(&mut self, rect: Rect, depth: f64, alpha: f64) {
        for r in rect.r0..rect.r1.min(self.rows) {
            for c in rect.c0..rect.c1.min(self.cols) {
                self.depth[r * self.cols + c] = depth;
                self.signal_alpha[r * self.cols + c] = alpha;
            }
        }
    }

    pub fn add_retro(&mut self, rect: Rect, depth: f64, alpha: f64) {
        self.retro_regions.push(RetroRegion { rect, depth, alpha });
    }

    /// Depth and signal maps after retroreflectors are painted in.
    pub fn resolved(&self) -> (Vec<f64>, Vec<f64>) {
        let mut depth = self.depth.clone();
        let mut alpha = self.signal_alpha.clone();
        for rr in &self.retro_regions {
            for r in rr.rect.r0..rr.rect.r1.min(self.rows) {
                for c in rr.rect.c0..rr.rect.c1.min(self.cols) {
                    depth[r * self.cols + c] = rr.depth;
                    alpha[r * self.cols + c] = rr.alpha;
                }
            }
        }
        (depth, alpha)
    }

    pub fn is_retro(&self, r: usize, c: usize) -> bool {
        self.retro_regions.iter().any(|rr| rr.rect.contains(r, c))
    }

    pub fn validate(&self, cfg: &SensorConfig) -> Result<()> {
        if (self.rows, self.cols) != (cfg.rows, cfg.cols) {
            return Err(Error::Config(format!(
                "scene is {}x{} but the sensor is {}x{}",
                self.rows, self.cols, cfg.rows, cfg.cols
            )));
        }
        let n = self.rows * self.cols;
        if self.depth.len() != n || self.signal_alpha.len() != n {
            return Err(Error::Config(
                "scene maps do not match the scene size".into(),
            ));
        }
        if let Some(b) = &self.beta_map {
            if b.len() != n || b.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(
                    "background map must match the scene and be nonnegative".into(),
                ));
            }
        }
        if !(self.background_beta >= 0.0) {
            return Err(Error::Config("background must be nonnegative".into()));
        }
        let (depth, alpha) = self.resolved();
        let t = cfg.bins as f64;
        if depth.iter().any(|d| !(*d >= 0.0 && *d < t)) {
            return Err(Error::Config(format!("scene depths must lie in [0, {t})")));
        }
        if alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("signal strengths must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn render_ideal_transient(
    scene: &SceneSpec,
    wf: &Waveform,
    cfg: &SensorConfig,
) -> Result<IdealTransient> {
    scene.validate(cfg)?;
    if wf.bins() != cfg.bins {
        return Err(Error::Config(format!(
            "waveform has {} bins, sensor has {}",
            wf.bins(),
            cfg.bins
        )));
    }
    let (depth, alpha) = scene.resolved();
    let t = cfg.bins;
    let mut out = IdealTransient::zeros(cfg.rows, cfg.cols, t);
    out.flux.par_chunks_mut(t).enumerate().for_each(|(p, px)| {
        let beta = scene
            .beta_map
            .as_ref()
            .map_or(scene.background_beta, |b| b[p]);
        px.fill(beta / t as f64);
        if alpha[p] > 0.0 {
            wf.render_into(px, depth[p], alpha[p]);
        }
    });
    Ok(out)
}

pub fn apply_glare(
    ideal: &IdealTransient,
    atlas: &GsfAtlas,
    cfg: &SensorConfig,
) -> Result<IdealTransient> {
    ideal.check_dims(cfg.rows, cfg.cols, cfg.bins)?;
    if (atlas.rows, atlas.cols) != (cfg.rows, cfg.cols) {
        return Err(Error::Config(format!(
            "atlas covers {}x{} but the sensor is {}x{}",
            atlas.rows, atlas.cols, cfg.rows, cfg.cols
        )));
    }
    GlareOperator::new(atlas)?.apply_transient(ideal)
}

fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if p <= 0.0 || n == 0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p)
        .expect("probability is inside (0, 1)")
        .sample(rng)
}

/// One frame of expected-value sampling: per-bin binomial draws with the
/// detection probabilities of the analytic dead-time model.
pub fn simulate_spad_expectation(
    flux: &IdealTransient,
    cfg: &SensorConfig,
    seed: u64,
) -> Result<HistogramCube> {
    simulate_spad_frames(flux, cfg, 1, seed)
}

/// Sum of `frames` independent frames, each clipped at the counter limit.
pub fn simulate_spad_frames(
    flux: &IdealTransient,
    cfg: &SensorConfig,
    frames: u64,
    seed: u64,
) -> Result<HistogramCube> {
    cfg.validate()?;
    flux.check_dims(cfg.rows, cfg.cols, cfg.bins)?;
    if frames == 0 {
        return Err(Error::Config("frames must be at least 1".into()));
    }
    let t = cfg.bins;
    let n = cfg.pulses_per_frame;
    let clip = cfg.clip_limit as u64;
    let total = n
        .checked_mul(frames)
        .ok_or_else(|| Error::Config("total pulse count overflows".into()))?;
    let mut cube = HistogramCube::zeros(cfg.rows, cfg.cols, t, total);
    cube.counts
        .par_chunks_mut(t)
        .enumerate()
        .try_for_each(|(p, counts)| -> Result<()> {
            let lam = &flux.flux[p * t..(p + 1) * t];
            if lam.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::NumericModel(format!(
                    "pixel {p} has negative or non-finite flux"
                )));
            }
            let mut q = vec![0.0; t];
            forward_q(lam, cfg.dead_time, &mut q);
            let mut rng = pixel_rng(seed, p);
            for (c, &qi) in counts.iter_mut().zip(&q) {
                if !(0.0..=1.0).contains(&qi) {
                    return Err(Error::NumericModel(format!(
                        "detection probability {qi} outside [0, 1] at pixel {p}"
                    )));
                }
                // A frame can only overflow its counter when N exceeds the
                // limit and the bin's count comes near it; otherwise the sum
                // over frames is a single binomial draw.
                let mean = n as f64 * qi;
                let v = if n <= clip || mean + 10.0 * mean.sqrt() + 10.0 < clip as f64 {
                    binomial(&mut rng, total, qi)
                } else {
                    (0..frames)
                        .map(|_| binomial(&mut rng, n, qi).min(clip))
                        .sum()
                };
                *c = u32::try_from(v).map_err(|_| {
                    Error::NumericModel(format!("count {v} overflows 32 bits at pixel {p}"))
                })?;
            }
            Ok(())
        })?;
    Ok(cube)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeadTimeModel {
    /// Every arrival, detected or not, restarts the dead interval.
    #[default]
    Paralyzable,
    /// Only detections start a dead interval.
    NonParalyzable,
}

/// Pulse-by-pulse photon arrival simulation of one frame.
pub fn simulate_spad_montecarlo(
    flux: &IdealTransient,
    cfg: &SensorConfig,
    seed: u64,
) -> Result<HistogramCube> {
    simulate_spad_montecarlo_with(flux, cfg, seed, DeadTimeModel::Paralyzable)
}

pub fn simulate_spad_montecarlo_with(
    flux: &IdealTransient,
    cfg: &SensorConfig,
    seed: u64,
    model: DeadTimeModel,
) -> Result<HistogramCube> {
    cfg.validate()?;
    flux.check_dims(cfg.rows, cfg.cols, cfg.bins)?;
    let t = cfg.bins;
    let mut cube = HistogramCube::zeros(cfg.rows, cfg.cols, t, cfg.pulses_per_frame);
    cube.counts
        .par_chunks_mut(t)
        .enumerate()
        .try_for_each(|(p, counts)| -> Result<()> {
            let lam = &flux.flux[p * t..(p + 1) * t];
            if lam.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::NumericModel(format!(
                    "pixel {p} has negative or non-finite flux"
                )));
            }
            let raw = montecarlo_pixel(lam, cfg, model, &mut pixel_rng(seed, p));
            for (c, v) in counts.iter_mut().zip(raw) {
                *c = v.min(cfg.clip_limit as u64) as u32;
            }
            Ok(())
        })?;
    Ok(cube)
}

fn montecarlo_pixel<R: Rng>(
    lam: &[f64],
    cfg: &SensorConfig,
    model: DeadTimeModel,
    rng: &mut R,
) -> Vec<u64> {
    let t = lam.len();
    let mut counts = vec![0u64; t];
    let mut cum = Vec::with_capacity(t + 1);
    cum.push(0.0);
    for v in lam {
        cum.push(cum.last().unwrap() + v);
    }
    let total = cum[t];
    if total <= 0.0 {
        return counts;
    }
    let l = cfg.censor_window() as i64;
    let warmup: i64 = match model {
        DeadTimeModel::Paralyzable => 1,
        DeadTimeModel::NonParalyzable => 4,
    };
    let mut last_arrival = i64::MIN / 2;
    let mut free_from = i64::MIN / 2;
    for pulse in -warmup..cfg.pulses_per_frame as i64 {
        let mut s = 0.0;
        let mut prev_bin = usize::MAX;
        loop {
            let e: f64 = rng.sample(Exp1);
            s += e;
            if s >= total {
                break;
            }
            let bin = cum.partition_point(|c| *c <= s) - 1;
            if bin == prev_bin {
                continue;
            }
            prev_bin = bin;
            let g = pulse * t as i64 + bin as i64;
            let detected = match model {
                DeadTimeModel::Paralyzable => {
                    let ok = g - last_arrival > l;
                    last_arrival = g;
                    ok
                }
                DeadTimeModel::NonParalyzable => {
                    let ok = g >= free_from;
                    if ok {
                        free_from = g + l + 1;
                    }
                    ok
                }
            };
            if detected && pulse >= 0 {
                counts[bin] += 1;
            }
        }
    }
    counts
}
