//! Synthetic calibration data and reference scenes for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gsf::{GsfAtlas, NormalizedGsf};
use crate::sensor::SensorConfig;
use crate::sim::{Rect, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAtlasParams {
    /// Measured source positions per axis.
    pub grid: usize,
    pub outscatter: f64,
    /// Relative spread of the outscatter ratio across entries.
    pub outscatter_jitter: f64,
    /// Length scale in pixels of the exponential falloff.
    pub falloff: f64,
    pub seed: u64,
}

impl Default for SyntheticAtlasParams {
    fn default() -> Self {
        Self {
            grid: 7,
            outscatter: 0.03,
            outscatter_jitter: 0.1,
            falloff: 80.0,
            seed: 7,
        }
    }
}

fn grid_positions(n: usize, g: usize) -> Vec<usize> {
    if g == 1 {
        return vec![n / 2];
    }
    (0..g)
        .map(|i| ((i as f64 + 0.5) * n as f64 / g as f64) as usize)
        .collect()
}

/// Atlas of exponentially decaying spreads measured on a regular grid.
pub fn synthetic_atlas(rows: usize, cols: usize, p: &SyntheticAtlasParams) -> Result<GsfAtlas> {
    if p.grid == 0 || !(p.falloff > 0.0) || !(p.outscatter > 0.0 && p.outscatter < 1.0) {
        return Err(Error::Config(
            "synthetic atlas needs a grid, a positive falloff and 0 < outscatter < 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut entries = Vec::new();
    for &sr in &grid_positions(rows, p.grid) {
        for &sc in &grid_positions(cols, p.grid) {
            let mut map = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let d = (r as f64 - sr as f64).hypot(c as f64 - sc as f64);
                    map[r * cols + c] = (-d / p.falloff).exp();
                }
            }
            map[sr * cols + sc] = 0.0;
            let s: f64 = map.iter().sum();
            map.iter_mut().for_each(|v| *v /= s);
            let jitter = 1.0 + p.outscatter_jitter * rng.random_range(-1.0..=1.0);
            entries.push(NormalizedGsf {
                rows,
                cols,
                source: (sr, sc),
                map,
                outscatter: (p.outscatter * jitter).clamp(0.0, 1.0),
            });
        }
    }
    GsfAtlas::new(rows, cols, entries)
}

/// Wall with a retroreflector patch and a dim target sharing its glare band.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScene {
    pub scene: SceneSpec,
    pub retro: Rect,
    pub target: Rect,
    /// Rows reached by the retroreflector's glare.
    pub band: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSceneParams {
    pub wall_depth: f64,
    pub wall_alpha: f64,
    pub retro_depth: f64,
    pub retro_alpha: f64,
    pub target_depth: f64,
    pub target_alpha: f64,
    pub beta: f64,
    pub retro_rows: usize,
    pub retro_cols: usize,
    pub band_rows: usize,
}

impl Default for ReferenceSceneParams {
    fn default() -> Self {
        Self {
            wall_depth: 85.0,
            wall_alpha: 0.01,
            retro_depth: 30.0,
            retro_alpha: 20.0,
            target_depth: 55.0,
            target_alpha: 0.02,
            beta: 0.2,
            retro_rows: 16,
            retro_cols: 24,
            band_rows: 17,
        }
    }
}

impl ReferenceSceneParams {
    /// Same geometry with every flux scaled, as behind a neutral density filter.
    pub fn attenuated(&self, factor: f64) -> Self {
        Self {
            wall_alpha: self.wall_alpha * factor,
            retro_alpha: self.retro_alpha * factor,
            target_alpha: self.target_alpha * factor,
            beta: self.beta * factor,
            ..self.clone()
        }
    }
}

pub fn reference_scene(cfg: &SensorConfig, p: &ReferenceSceneParams) -> Result<ReferenceScene> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    if rows < p.retro_rows + 2 || cols < p.retro_cols + 2 {
        return Err(Error::Config(format!(
            "sensor {rows}x{cols} too small for the reference scene"
        )));
    }
    let r0 = (rows - p.retro_rows) / 2;
    let c0 = (cols - p.retro_cols) / 2;
    let retro = Rect::new(r0, c0, r0 + p.retro_rows, c0 + p.retro_cols);
    let above = (p.band_rows.max(1) - 1) / 2;
    let below = p.band_rows.max(1) - 1 - above;
    let band = (
        r0.saturating_sub(above),
        (r0 + p.retro_rows + below).min(rows),
    );
    let target = Rect::new(band.0, cols / 8, band.1, cols - cols / 8);
    let mut scene = SceneSpec::uniform(rows, cols, p.wall_depth, p.wall_alpha, p.beta);
    scene.fill_rect(target, p.target_depth, p.target_alpha);
    scene.add_retro(retro, p.retro_depth, p.retro_alpha);
    scene.validate(cfg)?;
    Ok(ReferenceScene {
        scene,
        retro,
        target,
        band,
    })
}
