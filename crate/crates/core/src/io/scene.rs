//! Text description of a simulated scene.
//!
//! ```text
//! # base surface, depths in bins, signal and background in photons per pulse
//! depth = 85
//! alpha = 0.01
//! beta = 0.2
//! rect 80 32 113 224 55 0.02
//! retro 88 116 104 140 30 20
//! ```
//!
//! Alternatively `preset = reference` builds the built-in retroreflector scene,
//! optionally scaled with `attenuation = <factor>`. Rect lines are painted in order
//! on top of the preset or the uniform base.

use crate::error::{Error, Result};
use crate::sensor::SensorConfig;
use crate::sim::{Rect, SceneSpec};
use crate::synth::{reference_scene, ReferenceSceneParams};

#[derive(Debug, Clone, PartialEq)]
enum Paint {
    Rect(Rect, f64, f64),
    Retro(Rect, f64, f64),
}

fn fail(offset: usize, reason: impl Into<String>) -> Error {
    Error::format("scene", offset as u64, reason)
}

/// Builds a scene for a sensor of the given size from its text description.
pub fn parse_scene(text: &str, cfg: &SensorConfig) -> Result<SceneSpec> {
    let mut depth = 85.0;
    let mut alpha = 0.01;
    let mut beta = 0.2;
    let mut preset: Option<String> = None;
    let mut attenuation = 1.0;
    let mut paints = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some((k, v)) = body.split_once('=') {
            let v = v.trim();
            let number = || -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x >= 0.0)
                    .ok_or_else(|| fail(at, format!("`{v}` is not a nonnegative number")))
            };
            match k.trim() {
                "depth" => depth = number()?,
                "alpha" => alpha = number()?,
                "beta" => beta = number()?,
                "attenuation" => attenuation = number()?,
                "preset" => preset = Some(v.to_string()),
                other => return Err(fail(at, format!("unknown scene key `{other}`"))),
            }
            continue;
        }
        let words: Vec<&str> = body.split_whitespace().collect();
        let kind = words[0];
        if kind != "rect" && kind != "retro" {
            return Err(fail(at, format!("unknown scene directive `{kind}`")));
        }
        if words.len() != 7 {
            return Err(fail(at, format!("`{kind}` takes r0 c0 r1 c1 depth alpha")));
        }
        let idx: Vec<usize> = words[1..5]
            .iter()
            .map(|w| {
                w.parse::<usize>()
                    .map_err(|_| fail(at, format!("`{w}` is not a pixel index")))
            })
            .collect::<Result<_>>()?;
        let rect = Rect::new(idx[0], idx[1], idx[2], idx[3]);
        if rect.r0 >= rect.r1 || rect.c0 >= rect.c1 || rect.r1 > cfg.rows || rect.c1 > cfg.cols {
            return Err(fail(
                at,
                format!(
                    "rectangle {body} is empty or outside the {}x{} sensor",
                    cfg.rows, cfg.cols
                ),
            ));
        }
        let d: f64 = words[5].parse().map_err(|_| fail(at, "bad depth"))?;
        let a: f64 = words[6].parse().map_err(|_| fail(at, "bad alpha"))?;
        if !(d >= 0.0 && d < cfg.bins as f64) || !(a >= 0.0 && a.is_finite()) {
            return Err(fail(at, format!("depth {d} or alpha {a} out of range")));
        }
        paints.push(if kind == "rect" {
            Paint::Rect(rect, d, a)
        } else {
            Paint::Retro(rect, d, a)
        });
    }

    let mut scene = match preset.as_deref() {
        None => SceneSpec::uniform(cfg.rows, cfg.cols, depth, alpha, beta),
        Some("reference") => {
            reference_scene(
                cfg,
                &ReferenceSceneParams::default().attenuated(attenuation),
            )?
            .scene
        }
        Some(p) => return Err(Error::Config(format!("unknown scene preset `{p}`"))),
    };
    for p in paints {
        match p {
            Paint::Rect(r, d, a) => scene.fill_rect(r, d, a),
            Paint::Retro(r, d, a) => scene.add_retro(r, d, a),
        }
    }
    scene.validate(cfg)?;
    Ok(scene)
}
