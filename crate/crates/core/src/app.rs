//! File-based drivers behind the command line tool.

use std::path::{Path, PathBuf};

use crate::baseline::{baseline_depth, BaselineParams, ClampStats, SharpenOperator};
use crate::cube::HistogramCube;
use crate::deglare::DepthMap;
use crate::dsp::DspParams;
use crate::error::{Error, Result, StageExt};
use crate::gsf::{normalize_gsf, GsfAtlas, GsfMeasurement};
use crate::io::{self, ConfidenceImage, CountType, RunConfig};
use crate::metrics::{evaluate, ghost_mask, EvalReport};
use crate::pileup::{build_luts, default_grids, PileupLuts};
use crate::pipeline::{run, Calibration, PipelineOutput, PipelineParams};
use crate::sim::{apply_glare, render_ideal_transient, simulate_spad_frames};
use crate::waveform::Waveform;

pub const DEPTH_FILE: &str = "depth.dpth";
pub const CONFIDENCE_FILE: &str = "confidence.conf";
pub const ECHO_FILE: &str = "echoes.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const BASELINE_FILE: &str = "baseline.dpth";

/// Pulse shape from the configured file, or a Gaussian of the configured width.
pub fn waveform(cfg: &RunConfig) -> Result<Waveform> {
    match &cfg.waveform {
        Some(p) => io::load_waveform(p, cfg.sensor.bins),
        None => Waveform::gaussian(cfg.sensor.bins, cfg.waveform_fwhm),
    }
}

pub fn dsp_params(cfg: &RunConfig, wf: &Waveform) -> DspParams {
    let mut dsp = DspParams::for_sensor(cfg.sensor.bins, wf.fwhm());
    dsp.k = cfg.k_echoes;
    if let Some(w) = cfg.fit_window_bins {
        dsp.window = w;
    }
    dsp.min_sep = cfg.min_sep_bins.unwrap_or(dsp.window as usize);
    dsp.noise_window = cfg.noise_window.resolve(cfg.sensor.bins);
    dsp.bg_floor = cfg.bg_floor_photons;
    dsp.center_offset = cfg.center_offset;
    dsp
}

pub fn pipeline_params(cfg: &RunConfig, wf: &Waveform) -> PipelineParams {
    let mut p = PipelineParams::for_sensor(&cfg.sensor, wf);
    p.dsp = dsp_params(cfg, wf);
    p.estimator = cfg.estimator;
    p.sub_bin_refinement = cfg.sub_bin_refinement;
    let d = &mut p.deglare;
    d.window = p.dsp.window;
    d.source = cfg.glare_source;
    d.aggressor_floor = cfg.aggressor_floor;
    d.pileup_threshold = cfg.pileup_threshold_per_pulse;
    d.five_sigma_gate = cfg.five_sigma_gate;
    d.sigmoid_t = cfg.sigmoid_t;
    d.conf_cap = cfg.conf_cap;
    d.confidence_background = cfg.confidence_background;
    p
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "`{key}` must be set in the config or on the command line"
        ))
    })
}

pub fn load_atlas(cfg: &RunConfig) -> Result<GsfAtlas> {
    let atlas = io::decode_atlas(&io::read_file(required(&cfg.atlas, "atlas")?)?)?;
    if (atlas.rows, atlas.cols) != (cfg.sensor.rows, cfg.sensor.cols) {
        return Err(Error::Config(format!(
            "atlas is {}x{} but the sensor is {}x{}",
            atlas.rows, atlas.cols, cfg.sensor.rows, cfg.sensor.cols
        )));
    }
    Ok(atlas
        .with_band(cfg.band())
        .with_decay(cfg.decay_w, cfg.decay_sign))
}

/// Lookup tables from the configured file, or built on the default grids.
pub fn load_luts(cfg: &RunConfig, wf: &Waveform, window: f64) -> Result<PileupLuts> {
    let luts = match &cfg.luts {
        Some(p) => io::decode_luts(&io::read_file(p)?)?,
        None => {
            log::info!("no lookup table file configured, building tables on the default grids");
            let (a, b) = default_grids();
            build_luts(
                wf,
                &a,
                &b,
                window.round() as u32,
                cfg.sensor.dead_time,
                cfg.sensor.bins,
            )?
        }
    };
    if luts.window as f64 != window.round() {
        return Err(Error::Config(format!(
            "lookup tables use a {}-bin window but the pipeline uses {window}",
            luts.window
        )));
    }
    Ok(luts)
}

/// Reads and sums cubes, as when accumulating frames.
pub fn load_cubes(paths: &[PathBuf]) -> Result<HistogramCube> {
    let Some((first, rest)) = paths.split_first() else {
        return Err(Error::Config("no cube given".into()));
    };
    let mut cube = io::decode_cube(&io::read_file(first)?)?;
    for p in rest {
        cube.accumulate(&io::decode_cube(&io::read_file(p)?)?)?;
    }
    Ok(cube)
}

fn check_cube(cube: &HistogramCube, cfg: &RunConfig) -> Result<()> {
    let s = &cfg.sensor;
    if (cube.rows, cube.cols, cube.bins) != (s.rows, s.cols, s.bins) {
        return Err(Error::Config(format!(
            "cube is {}x{}x{} but the sensor is {}x{}x{}",
            cube.rows, cube.cols, cube.bins, s.rows, s.cols, s.bins
        )));
    }
    Ok(())
}

fn ghost_tolerance(cfg: &RunConfig) -> f64 {
    cfg.ghost_tolerance
        .unwrap_or(2.0 * cfg.sensor.range_per_bin)
}

/// Pixels reported at the ghost depth although the truth lies elsewhere.
pub fn ghost_count(truth: &DepthMap, map: &DepthMap, depth: f64, tol: f64) -> usize {
    let at_ghost = ghost_mask(map, depth, tol);
    let truly_there = ghost_mask(truth, depth, tol);
    at_ghost
        .iter()
        .zip(&truly_there)
        .zip(&truth.depth)
        .filter(|((g, t), d)| **g && !**t && !d.is_nan())
        .count()
}

/// Scores a prediction, adding ghost counts when a ghost depth is configured.
pub fn evaluate_with(
    cfg: &RunConfig,
    truth: &DepthMap,
    pred: &DepthMap,
    before: Option<&DepthMap>,
) -> Result<EvalReport> {
    let mut report = evaluate(truth, pred, &cfg.delta_thresholds, None, cfg.missing_depth)?;
    if let Some(g) = cfg.ghost_depth {
        let tol = ghost_tolerance(cfg);
        report.n_ghost_after = Some(ghost_count(truth, pred, g, tol));
        report.n_ghost_before = before.map(|b| ghost_count(truth, b, g, tol));
    }
    Ok(report)
}

pub struct RunOutputs {
    pub output: PipelineOutput,
    pub confidence: ConfidenceImage,
    pub echo_table: String,
    pub report: Option<EvalReport>,
}

impl RunOutputs {
    pub fn depth(&self) -> &DepthMap {
        &self.output.depth
    }
}

/// Runs the pipeline on one cube with settings from a config file.
pub fn run_pipeline(cube_path: &Path, config_path: &Path, out_dir: &Path) -> Result<RunOutputs> {
    let cfg = RunConfig::load(config_path)?;
    run_pipeline_with(&[cube_path.to_path_buf()], &cfg, Some(out_dir))
}

/// Runs the pipeline on the sum of the given cubes; writes outputs when `out_dir` is set.
pub fn run_pipeline_with(
    cubes: &[PathBuf],
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutputs> {
    cfg.validate()?;
    let cube = load_cubes(cubes)?;
    check_cube(&cube, cfg)?;
    let wf = waveform(cfg).stage("waveform")?;
    let params = pipeline_params(cfg, &wf);
    let atlas = load_atlas(cfg).stage("glare atlas")?;
    let luts = load_luts(cfg, &wf, params.dsp.window).stage("lookup tables")?;
    let cal = Calibration::new(wf, luts, &atlas, params.dsp.window)?;
    let output = run(&cube, &cal, &params)?;
    let confidence = ConfidenceImage {
        rows: cube.rows,
        cols: cube.cols,
        values: output.confidence.winning(),
    };
    let echo_table = io::echo_table(
        &output.echoes,
        &output.glare,
        &output.confidence,
        &output.depth.source,
    );
    let report = match &cfg.truth {
        Some(p) => {
            let truth = io::decode_depth(&io::read_file(p)?)?;
            let before = output.without_deglare(&params);
            Some(evaluate_with(cfg, &truth, &output.depth, Some(&before)).stage("evaluation")?)
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        io::write_file(&dir.join(DEPTH_FILE), &io::encode_depth(&output.depth)?)?;
        io::write_file(
            &dir.join(CONFIDENCE_FILE),
            &io::encode_confidence(&confidence)?,
        )?;
        io::write_file(&dir.join(ECHO_FILE), echo_table.as_bytes())?;
        if let Some(r) = &report {
            io::write_file(&dir.join(REPORT_FILE), r.to_text().as_bytes())?;
        }
    }
    Ok(RunOutputs {
        output,
        confidence,
        echo_table,
        report,
    })
}

/// Photographic baseline on the sum of the given cubes.
pub fn run_baseline(
    cubes: &[PathBuf],
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<(DepthMap, ClampStats)> {
    cfg.validate()?;
    let cube = load_cubes(cubes)?;
    check_cube(&cube, cfg)?;
    let wf = waveform(cfg)?;
    let atlas = load_atlas(cfg)?;
    let glare = crate::gsf::GlareOperator::new(&atlas)?;
    let op = SharpenOperator::from_glare(&glare).stage("baseline kernel")?;
    let params = BaselineParams {
        dsp: dsp_params(cfg, &wf),
        five_sigma_gate: cfg.five_sigma_gate,
        range_per_bin: cfg.sensor.range_per_bin,
    };
    let (map, stats) = baseline_depth(&cube, &op, &wf, &params).stage("baseline")?;
    if stats.clamped > 0 {
        log::info!(
            "baseline clamped {} negative values ({:.1} photons)",
            stats.clamped,
            stats.clamped_mass
        );
    }
    if let Some(p) = out {
        io::write_file(p, &io::encode_depth(&map)?)?;
    }
    Ok((map, stats))
}

/// Simulates a scene file, writing the cube and its ground-truth depth map.
pub fn simulate(
    cfg: &RunConfig,
    scene_path: &Path,
    cube_out: &Path,
    truth_out: Option<&Path>,
) -> Result<HistogramCube> {
    cfg.validate()?;
    let text = std::fs::read_to_string(scene_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", scene_path.display()),
        ))
    })?;
    let scene = io::parse_scene(&text, &cfg.sensor)?;
    let wf = waveform(cfg)?;
    let ideal = render_ideal_transient(&scene, &wf, &cfg.sensor).stage("render")?;
    let flux = match &cfg.atlas {
        Some(_) => apply_glare(&ideal, &load_atlas(cfg)?, &cfg.sensor).stage("glare")?,
        None => ideal,
    };
    let cube = simulate_spad_frames(&flux, &cfg.sensor, cfg.frames, cfg.seed).stage("sampling")?;
    io::write_file(
        cube_out,
        &io::encode_cube(&cube, CountType::for_cube(&cube))?,
    )?;
    if let Some(p) = truth_out {
        let (depth, _) = scene.resolved();
        let meters = depth
            .iter()
            .map(|d| (d * cfg.sensor.range_per_bin) as f32)
            .collect();
        let truth = DepthMap::from_meters(cfg.sensor.rows, cfg.sensor.cols, meters);
        io::write_file(p, &io::encode_depth(&truth)?)?;
    }
    Ok(cube)
}

/// Glare atlas from cubes recorded with one source pixel lit each.
///
/// Each cube is summed over time after removing its per-pixel background,
/// estimated from the noise window.
pub fn calibrate_gsf(cfg: &RunConfig, cubes: &[PathBuf]) -> Result<GsfAtlas> {
    cfg.validate()?;
    let noise = cfg.noise_window.resolve(cfg.sensor.bins);
    let mut entries = Vec::with_capacity(cubes.len());
    for path in cubes {
        let cube = io::decode_cube(&io::read_file(path)?)?;
        check_cube(&cube, cfg)?;
        let raw: Vec<f64> = (0..cube.pixels())
            .map(|p| {
                let h = cube.pixel_index(p);
                let total: f64 = h.iter().map(|c| *c as f64).sum();
                let bg: f64 =
                    h[noise.clone()].iter().map(|c| *c as f64).sum::<f64>() / noise.len() as f64;
                (total - bg * cube.bins as f64).max(0.0)
            })
            .collect();
        let meas = GsfMeasurement::new(cube.rows, cube.cols, raw)
            .map_err(|e| Error::Calibration(format!("{}: {e}", path.display())))?;
        entries.push(
            normalize_gsf(&meas)
                .map_err(|e| Error::Calibration(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(GsfAtlas::new(cfg.sensor.rows, cfg.sensor.cols, entries)?
        .with_band(cfg.band())
        .with_decay(cfg.decay_w, cfg.decay_sign))
}

/// Lookup tables on the given grids for the configured pulse and window.
pub fn build_tables(cfg: &RunConfig, alpha: &[f64], beta: &[f64]) -> Result<PileupLuts> {
    cfg.validate()?;
    let wf = waveform(cfg)?;
    let window = dsp_params(cfg, &wf).window.round() as u32;
    build_luts(
        &wf,
        alpha,
        beta,
        window,
        cfg.sensor.dead_time,
        cfg.sensor.bins,
    )
}
