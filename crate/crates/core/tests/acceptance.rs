//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spad_deglare::baseline::{
    baseline_depth, decompose_gsf, BaselineParams, SharpenOperator, SlicePlan,
};
use spad_deglare::cube::{HistogramCube, IdealTransient};
use spad_deglare::deglare::{
    binomial_confidence, predict_glare, temporal_overlap, DeglareParams, DepthMap, OverlapTable,
};
use spad_deglare::dsp::{
    extract_echoes, find_peaks, matched_filter, refine_peak, window_moments, DspParams, Echo,
};
use spad_deglare::gsf::{
    apply_band_mask, distance_weight, interpolate_gsf, normalize_gsf, GlareOperator, GsfAtlas,
    GsfMeasurement, NormalizedGsf,
};
use spad_deglare::io::{self, ConfidenceImage, CountType, RunConfig};
use spad_deglare::metrics::{delta_i, MissingPolicy};
use spad_deglare::pileup::{
    beta_from_background, build_luts, correct_echo_with, correct_echoes, default_grids, forward_q,
    CorrectedEcho, CorrectedEchoSet, CorrectionParams, PileupLuts, ReturnModel,
};
use spad_deglare::pipeline::{run, Calibration, PipelineOutput, PipelineParams};
use spad_deglare::sensor::SensorConfig;
use spad_deglare::sim::{
    apply_glare, render_ideal_transient, simulate_spad_frames, simulate_spad_montecarlo_with,
    DeadTimeModel, Rect, SceneSpec,
};
use spad_deglare::synth::{
    reference_scene, synthetic_atlas, ReferenceScene, ReferenceSceneParams, SyntheticAtlasParams,
};
use spad_deglare::waveform::Waveform;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

fn luts_for(wf: &Waveform, cfg: &SensorConfig) -> PileupLuts {
    let (a, b) = default_grids();
    build_luts(wf, &a, &b, 20, cfg.dead_time, cfg.bins).unwrap()
}

fn pulse_flux(wf: &Waveform, bins: usize, alpha: f64, beta: f64, depth: f64) -> Vec<f64> {
    let mut flux = vec![beta / bins as f64; bins];
    wf.render_into(&mut flux, depth, alpha);
    flux
}

// 1. Analytic detection probabilities against pulse-by-pulse simulation.
fn pileup_vs_montecarlo() -> Outcome {
    let alphas = [0.01, 0.1, 1.0, 5.0, 20.0];
    let betas = [0.0, 0.5, 2.0];
    let pulses = 100_000u64;
    let mut cfg = SensorConfig::with_dims(alphas.len(), betas.len(), 672);
    cfg.pulses_per_frame = pulses;
    cfg.clip_limit = u32::MAX;
    let wf = Waveform::gaussian(cfg.bins, 10.0).unwrap();
    let mut ideal = IdealTransient::zeros(cfg.rows, cfg.cols, cfg.bins);
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            ideal
                .pixel_mut(i, j)
                .copy_from_slice(&pulse_flux(&wf, cfg.bins, a, b, 300.0));
        }
    }
    let score = |model| {
        let cube = simulate_spad_montecarlo_with(&ideal, &cfg, 11, model).unwrap();
        let n = pulses as f64;
        let (mut ok, mut total, mut worst) = (0usize, 0usize, (1.0f64, 0.0, 0.0));
        for (i, &a) in alphas.iter().enumerate() {
            for (j, &b) in betas.iter().enumerate() {
                let mut q = vec![0.0; cfg.bins];
                forward_q(ideal.pixel(i, j), cfg.dead_time, &mut q);
                let counts = cube.pixel(i, j);
                let good = q
                    .iter()
                    .zip(counts)
                    .filter(|(q, c)| {
                        let sd = (n * *q * (1.0 - *q)).sqrt();
                        (**c as f64 - n * *q).abs() <= 3.0 * sd
                    })
                    .count();
                let frac = good as f64 / cfg.bins as f64;
                if frac < worst.0 {
                    worst = (frac, a, b);
                }
                ok += good;
                total += cfg.bins;
            }
        }
        (ok as f64 / total as f64, worst)
    };
    let (frac, worst) = score(DeadTimeModel::Paralyzable);
    let (frac_np, _) = score(DeadTimeModel::NonParalyzable);
    outcome(
        frac >= 0.99,
        format!(
            "{:.2}% of bins within 3 sigma (worst setting alpha={} beta={} at {:.2}%; non-paralyzable oracle {:.2}%)",
            100.0 * frac,
            worst.1,
            worst.2,
            100.0 * worst.0,
            100.0 * frac_np
        ),
    )
}

// 2. Moment inversion recovers intensity and position.
fn pileup_round_trip(luts: &PileupLuts, wf: &Waveform, cfg: &SensorConfig) -> Outcome {
    let dsp = DspParams::for_sensor(cfg.bins, wf.fwhm());
    let pulses = 100_000u64;
    let params = CorrectionParams {
        pulses,
        bins: cfg.bins,
        threshold: 0.05,
        estimator: Default::default(),
        dead_time: cfg.dead_time,
    };
    let n = pulses as f64;
    let model = ReturnModel::new(wf, cfg.dead_time, 20);
    // Noiseless: the expected histogram itself.
    let mut worst_a = 0.0f64;
    let mut worst_m = 0.0f64;
    let mut cases = 0;
    for &beta in &[0.0, 0.5, 2.0] {
        for i in 0..40 {
            let alpha = 0.06 * (50.0f64 / 0.06).powf(i as f64 / 39.0);
            for &depth in &[60.0, 60.3, 60.5] {
                let flux = pulse_flux(wf, cfg.bins, alpha, beta, depth);
                let mut q = vec![0.0; cfg.bins];
                forward_q(&flux, cfg.dead_time, &mut q);
                let hist: Vec<f64> = q.iter().map(|v| v * n).collect();
                let f = matched_filter(&hist, wf);
                let peak = find_peaks(&f, 1, dsp.min_sep, 0.0)[0];
                let m = window_moments(&hist, refine_peak(&f, peak), dsp.window);
                let raw = hist[dsp.noise_window.clone()].iter().sum::<f64>()
                    / dsp.noise_window.len() as f64;
                let echo = Echo {
                    row: 0,
                    col: 0,
                    peak_bin: peak,
                    peak_height: f[peak],
                    counts: m.counts,
                    mean_tof: m.mean,
                    var_tof: m.var,
                    background: raw,
                    background_raw: raw,
                    degenerate: m.degenerate,
                };
                let beta_hat = beta_from_background(raw, pulses, cfg.dead_time, cfg.bins);
                let c = correct_echo_with(&echo, beta_hat, luts, &params, Some(&model));
                worst_a = worst_a.max((c.alpha_hat - alpha).abs() / alpha);
                worst_m = worst_m.max((c.mean_corrected - depth).abs());
                cases += 1;
            }
        }
    }
    let noiseless = worst_a <= 0.02 && worst_m <= 0.25;

    // Sampled histograms, several independent pixels per setting.
    let alphas = [0.1, 0.5, 1.0, 5.0, 20.0];
    let betas = [0.0, 0.5, 2.0];
    let reps = 4;
    let mut scfg = SensorConfig::with_dims(alphas.len() * betas.len(), reps, cfg.bins);
    scfg.pulses_per_frame = pulses;
    scfg.clip_limit = u32::MAX;
    let mut ideal = IdealTransient::zeros(scfg.rows, scfg.cols, scfg.bins);
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            for r in 0..reps {
                let flux = pulse_flux(wf, cfg.bins, a, b, 60.0 + 0.25 * r as f64);
                ideal
                    .pixel_mut(i * betas.len() + j, r)
                    .copy_from_slice(&flux);
            }
        }
    }
    let cube = simulate_spad_frames(&ideal, &scfg, 1, 5).unwrap();
    let raw = extract_echoes(
        &cube,
        wf,
        &DspParams {
            k: 1,
            ..dsp.clone()
        },
    )
    .unwrap();
    let set = correct_echoes(&raw, luts, &params, Some(&model));
    let mut s_worst_a = 0.0f64;
    let mut s_worst_m = 0.0f64;
    for (i, &a) in alphas.iter().enumerate() {
        for j in 0..betas.len() {
            for r in 0..reps {
                let p = (i * betas.len() + j) * reps + r;
                let Some(e) = set.echoes[p].first() else {
                    s_worst_a = f64::INFINITY;
                    continue;
                };
                s_worst_a = s_worst_a.max((e.alpha_hat - a).abs() / a);
                s_worst_m = s_worst_m.max((e.mean_corrected - (60.0 + 0.25 * r as f64)).abs());
            }
        }
    }
    let sampled = s_worst_a <= 0.05 && s_worst_m <= 0.5;
    outcome(
        noiseless && sampled,
        format!(
            "noiseless ({cases} cases): max alpha error {:.3}%, max mean error {:.3} bins; sampled: max alpha error {:.2}%, max mean error {:.3} bins",
            100.0 * worst_a,
            worst_m,
            100.0 * s_worst_a,
            s_worst_m
        ),
    )
}

fn plain_echo(row: usize, col: usize, t: f64, strength: f64) -> CorrectedEcho {
    CorrectedEcho {
        base: Echo {
            row,
            col,
            peak_bin: t as usize,
            peak_height: 0.0,
            counts: strength,
            mean_tof: t,
            var_tof: 1.0,
            background: 0.0,
            background_raw: 0.0,
            degenerate: false,
        },
        alpha_hat: strength / 1000.0,
        mean_corrected: t,
        total_energy: strength,
        gamma_prime: strength / 1000.0,
        beta_hat: 0.0,
        pileup_applied: false,
        saturated: false,
    }
}

// 3. Loop-form glare prediction against the dense operator.
fn backprojection_equivalence() -> Outcome {
    let (rows, cols, bins, k) = (4usize, 4usize, 64usize, 2usize);
    let wf = Waveform::gaussian(bins, 4.0).unwrap();
    let window = 8.0;
    let overlap = OverlapTable::new(&wf, window).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut nonzero = 0usize;
    for _ in 0..1000 {
        // Random atlas over a random subset of source positions.
        let mut entries = Vec::new();
        for p in 0..rows * cols {
            if entries.is_empty() && p == rows * cols - 1 || rng.random_bool(0.3) {
                let mut map: Vec<f64> = (0..rows * cols)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                map[p] = 0.0;
                let s: f64 = map.iter().sum();
                map.iter_mut().for_each(|v| *v /= s);
                entries.push(NormalizedGsf {
                    rows,
                    cols,
                    source: (p / cols, p % cols),
                    map,
                    outscatter: rng.random_range(0.01..0.5),
                });
            }
        }
        let band = match rng.random_range(0..4) {
            0 => None,
            b => Some(b),
        };
        let (w, sign) = (
            rng.random_range(0.0..0.5),
            if rng.random_bool(0.5) { -1.0 } else { 1.0 },
        );
        let atlas = GsfAtlas::new(rows, cols, entries)
            .unwrap()
            .with_band(band)
            .with_decay(w, sign);
        let op = GlareOperator::new(&atlas).unwrap();

        let echoes: Vec<Vec<CorrectedEcho>> = (0..rows * cols)
            .map(|p| {
                (0..k)
                    .map(|_| {
                        let t = if rng.random_bool(0.2) {
                            rng.random_range(0.0..bins as f64)
                        } else {
                            rng.random_range(20.0..30.0)
                        };
                        plain_echo(p / cols, p % cols, t, rng.random_range(1.0..1e4))
                    })
                    .collect()
            })
            .collect();
        let set = CorrectedEchoSet {
            rows,
            cols,
            bins,
            pulses: 1000,
            echoes,
        };
        let mut params = DeglareParams::new(window, 1.0);
        params.aggressor_floor = 0.0;
        let got = predict_glare(&set, &op, &overlap, &params).unwrap();

        // Dense matrix over all echoes from the interpolated, band-masked,
        // distance-weighted atlas and the directly evaluated overlap.
        let weighted = GsfAtlas {
            entries: atlas
                .entries
                .iter()
                .map(|e| distance_weight(e, w, sign).unwrap())
                .collect(),
            ..atlas.clone()
        };
        let spread: Vec<(Vec<f64>, f64)> = (0..rows * cols)
            .map(|p| {
                // A position or band holding no glare mass spreads nothing.
                let Ok(g) = interpolate_gsf(&weighted, (p / cols, p % cols)) else {
                    return (vec![0.0; rows * cols], 0.0);
                };
                let m = match band {
                    Some(b) => apply_band_mask(&g.map, rows, cols, (p / cols) as isize, b)
                        .unwrap_or_else(|_| vec![0.0; rows * cols]),
                    None => g.map.clone(),
                };
                (m, g.outscatter)
            })
            .collect();
        let n = rows * cols * k;
        let mut dense = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let (pu, pv) = (u / k, v / k);
                if pu == pv {
                    continue;
                }
                let tu = set.echoes[pu][u % k].mean_corrected;
                let tv = set.echoes[pv][v % k].mean_corrected;
                let mut dt = (tv - tu).rem_euclid(bins as f64);
                if dt > bins as f64 / 2.0 {
                    dt -= bins as f64;
                }
                dense[u * n + v] =
                    spread[pv].1 * spread[pv].0[pu] * temporal_overlap(dt, window, &wf);
            }
        }
        let y: Vec<f64> = (0..n)
            .map(|v| set.echoes[v / k][v % k].total_energy)
            .collect();
        let scale = (0..n)
            .map(|u| (0..n).map(|v| dense[u * n + v] * y[v]).sum::<f64>())
            .collect::<Vec<_>>();
        let top = scale.iter().fold(0.0f64, |m, v| m.max(*v));
        for u in 0..n {
            let want = scale[u];
            let have = got.g_bar[u / k][u % k];
            if want > 0.0 {
                nonzero += 1;
            }
            worst =
                worst.max((have - want).abs() / want.abs().max(1e-12 * top).max(f64::MIN_POSITIVE));
        }
    }
    outcome(
        worst <= 1e-9,
        format!("1000 trials, {nonzero} nonzero entries, max relative difference {worst:.2e}"),
    )
}

fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

// 4. Confidence semantics.
fn confidence_semantics() -> Outcome {
    let c = binomial_confidence(1.0, 10.0, 0.1, 1e6).unwrap();
    let example =
        (c - 0.9482).abs() < 1e-4 && (c - -(10.0 * 0.1 * 0.9f64.powi(9)).ln()).abs() < 1e-6;
    let mut zero_rule = true;
    let mut monotone = true;
    let mut oracle = 0.0f64;
    for &(n, p) in &[
        (10u64, 0.1),
        (50, 0.2),
        (200, 0.013),
        (1000, 0.37),
        (7, 0.5),
    ] {
        let nf = n as f64;
        let mut prev = 0.0;
        for y in 0..=n {
            let yf = y as f64;
            let c = binomial_confidence(yf, nf, p, 1e6).unwrap();
            if yf < nf * p {
                zero_rule &= c == 0.0;
            } else {
                zero_rule &= c > 0.0 || y == n && p == 1.0;
                monotone &= c >= prev;
                prev = c;
                let direct = -(ln_factorial(n) - ln_factorial(y) - ln_factorial(n - y)
                    + yf * p.ln()
                    + (nf - yf) * (1.0 - p).ln());
                oracle = oracle.max((c - direct).abs() / direct.abs().max(1.0));
            }
        }
    }
    outcome(
        example && zero_rule && monotone && oracle < 1e-9,
        format!(
            "N=10 P=0.1 Y=1 gives {c:.7}; zero below expectation: {zero_rule}; monotone: {monotone}; max deviation from factorial evaluation {oracle:.1e}"
        ),
    )
}

/// Synthetic atlas with the default band and distance weighting.
fn default_atlas(rows: usize, cols: usize) -> GsfAtlas {
    let rc = RunConfig::default();
    synthetic_atlas(rows, cols, &SyntheticAtlasParams::default())
        .unwrap()
        .with_band(rc.band())
        .with_decay(rc.decay_w, rc.decay_sign)
}

struct SceneRun {
    cfg: SensorConfig,
    scene: ReferenceScene,
    params: ReferenceSceneParams,
    cube: HistogramCube,
    atlas: GsfAtlas,
    cal: Calibration,
    pparams: PipelineParams,
    out: PipelineOutput,
}

fn scene_run(
    rows: usize,
    cols: usize,
    attenuation: f64,
    pulses: u64,
    frames: u64,
    wf: &Waveform,
    luts: &PileupLuts,
) -> SceneRun {
    let mut cfg = SensorConfig::with_dims(rows, cols, 672);
    cfg.pulses_per_frame = pulses;
    let params = ReferenceSceneParams::default().attenuated(attenuation);
    let scene = reference_scene(&cfg, &params).unwrap();
    let atlas = default_atlas(rows, cols);
    let ideal = render_ideal_transient(&scene.scene, wf, &cfg).unwrap();
    let glared = apply_glare(&ideal, &atlas, &cfg).unwrap();
    let cube = simulate_spad_frames(&glared, &cfg, frames, 1).unwrap();
    let pparams = PipelineParams::for_sensor(&cfg, wf);
    let cal = Calibration::new(wf.clone(), luts.clone(), &atlas, pparams.dsp.window).unwrap();
    let out = run(&cube, &cal, &pparams).unwrap();
    SceneRun {
        cfg,
        scene,
        params,
        cube,
        atlas,
        cal,
        pparams,
        out,
    }
}

impl SceneRun {
    fn truth(&self) -> DepthMap {
        let (d, _) = self.scene.scene.resolved();
        DepthMap::from_meters(
            self.cfg.rows,
            self.cfg.cols,
            d.iter()
                .map(|v| (v * self.cfg.range_per_bin) as f32)
                .collect(),
        )
    }

    fn tol(&self) -> f64 {
        2.0 * self.cfg.range_per_bin
    }

    fn in_band(&self, p: usize) -> bool {
        let (r, c) = (p / self.cfg.cols, p % self.cfg.cols);
        r >= self.scene.band.0 && r < self.scene.band.1 && !self.scene.scene.is_retro(r, c)
    }

    /// Band pixels whose uncorrected depth sits on the retroreflector.
    fn ghosts(&self, before: &DepthMap) -> Vec<usize> {
        let rr = self.params.retro_depth * self.cfg.range_per_bin;
        let truth = self.truth();
        (0..before.depth.len())
            .filter(|&p| self.in_band(p))
            .filter(|&p| ((before.depth[p] as f64) - rr).abs() <= self.tol())
            .filter(|&p| ((truth.depth[p] as f64) - rr).abs() > self.tol())
            .collect()
    }

    fn recovered(&self, ghosts: &[usize], after: &DepthMap) -> usize {
        let truth = self.truth();
        ghosts
            .iter()
            .filter(|&&p| ((after.depth[p] as f64) - truth.depth[p] as f64).abs() <= self.tol())
            .count()
    }
}

// 5. Ghost suppression on the full-size reference scene.
fn end_to_end(full: &SceneRun) -> Outcome {
    let before = full.out.without_deglare(&full.pparams);
    let after = &full.out.depth;
    let band: Vec<usize> = (0..before.depth.len())
        .filter(|&p| full.in_band(p))
        .collect();
    let ghosts = full.ghosts(&before);
    let ghost_frac = ghosts.len() as f64 / band.len() as f64;
    let rec = full.recovered(&ghosts, after) as f64 / ghosts.len().max(1) as f64;
    let truth = full.truth();
    let mask: Vec<bool> = (0..before.depth.len()).map(|p| full.in_band(p)).collect();
    let d_before = delta_i(&truth, &before, 1.0, Some(&mask), MissingPolicy::Exclude).unwrap();
    let d_after = delta_i(&truth, after, 1.0, Some(&mask), MissingPolicy::Exclude).unwrap();
    let tol = full.tol();
    let outside: Vec<usize> = (0..before.depth.len())
        .filter(|&p| {
            let r = p / full.cfg.cols;
            r < full.scene.band.0 || r >= full.scene.band.1
        })
        .collect();
    let changed = outside
        .iter()
        .filter(|&&p| {
            let (b, a) = (before.depth[p], after.depth[p]);
            b.is_nan() != a.is_nan() || (!b.is_nan() && ((a - b) as f64).abs() > tol)
        })
        .count();
    let changed_frac = changed as f64 / outside.len() as f64;
    outcome(
        ghost_frac >= 0.30 && rec >= 0.90 && d_after - d_before >= 0.25 && changed_frac <= 0.02,
        format!(
            "ghosts {:.1}% of {} band pixels, recovered {:.1}%, band delta_1 {:.3} -> {:.3}, non-glare pixels changed {:.2}%",
            100.0 * ghost_frac,
            band.len(),
            100.0 * rec,
            d_before,
            d_after,
            100.0 * changed_frac
        ),
    )
}

fn baseline_recovery(run: &SceneRun) -> (f64, f64, usize) {
    let before = run.out.without_deglare(&run.pparams);
    let ghosts = run.ghosts(&before);
    let glare = GlareOperator::new(&run.atlas).unwrap();
    let op = SharpenOperator::from_glare(&glare).unwrap();
    let bp = BaselineParams {
        dsp: run.pparams.dsp.clone(),
        five_sigma_gate: run.pparams.deglare.five_sigma_gate,
        range_per_bin: run.cfg.range_per_bin,
    };
    let (base, _) = baseline_depth(&run.cube, &op, &run.cal.waveform, &bp).unwrap();
    let n = ghosts.len().max(1) as f64;
    (
        run.recovered(&ghosts, &base) as f64 / n,
        run.recovered(&ghosts, &run.out.depth) as f64 / n,
        ghosts.len(),
    )
}

// 6. Photographic baseline works without pileup and fails with it.
fn photographic_baseline(full: &SceneRun, wf: &Waveform, luts: &PileupLuts) -> Outcome {
    let weak = scene_run(full.cfg.rows, full.cfg.cols, 1e-4, 4_000_000, 500, wf, luts);
    let (b_weak, p_weak, g_weak) = baseline_recovery(&weak);
    let (b_full, p_full, g_full) = baseline_recovery(full);
    outcome(
        b_weak >= 0.80 && b_full < 0.20 && p_weak >= 0.90 && p_full >= 0.90,
        format!(
            "attenuated ({g_weak} ghosts): baseline {:.1}%, pipeline {:.1}%; full flux ({g_full} ghosts): baseline {:.1}%, pipeline {:.1}%",
            100.0 * b_weak,
            100.0 * p_weak,
            100.0 * b_full,
            100.0 * p_full
        ),
    )
}

fn random_measurement(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> GsfMeasurement {
    let src = rng.random_range(0..rows * cols);
    let mut raw: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(0.0..50.0))
        .collect();
    raw[src] = 1e4 + rng.random_range(0.0..1e4);
    GsfMeasurement::new(rows, cols, raw).unwrap()
}

// 7. Glare spread function algebra.
fn gsf_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut norm_err = 0.0f64;
    for _ in 0..50 {
        let g = normalize_gsf(&random_measurement(&mut rng, 9, 13)).unwrap();
        norm_err = norm_err.max((g.map.iter().sum::<f64>() - 1.0).abs());
    }
    let atlas = synthetic_atlas(24, 32, &SyntheticAtlasParams::default()).unwrap();
    let exact = atlas
        .entries
        .iter()
        .all(|e| interpolate_gsf(&atlas, e.source).unwrap() == *e);
    let mut idem = true;
    for b in 1..8 {
        let m = &atlas.entries[10].map;
        let once = apply_band_mask(m, 24, 32, 12, b).unwrap();
        let twice = apply_band_mask(&once, 24, 32, 12, b).unwrap();
        idem &= once.iter().zip(&twice).all(|(a, b)| (a - b).abs() <= 1e-15);
    }

    // Sharpening conserves energy before clamping, on both the direct and FFT paths.
    let mut energy = 0.0f64;
    for &(r, c) in &[(8usize, 8usize), (20, 24), (33, 17)] {
        let op = decompose_gsf(&random_measurement(&mut rng, r, c)).unwrap();
        let plan = SlicePlan::new(&op, r, c);
        let y: Vec<f64> = (0..r * c).map(|_| rng.random_range(0.0..100.0)).collect();
        let s = plan.sharpen(&y);
        let (sy, ss): (f64, f64) = (y.iter().sum(), s.iter().sum());
        energy = energy.max((sy - ss).abs() / sy);
    }

    // Bias identity on a dense 8x8 instance.
    let (rows, cols) = (8usize, 8usize);
    let op = decompose_gsf(&random_measurement(&mut rng, rows, cols)).unwrap();
    let m = rows * cols;
    let at = |dr: isize, dc: isize| -> f64 {
        let r = op.center.0 as isize + dr;
        let c = op.center.1 as isize + dc;
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            op.kernel[r as usize * cols + c as usize]
        }
    };
    // Column u of B spreads source u over the frame, renormalized to the in-frame mass.
    let mut b = vec![0.0; m * m];
    for u in 0..m {
        let (ur, uc) = ((u / cols) as isize, (u % cols) as isize);
        let z: f64 = (0..m)
            .map(|v| at((v / cols) as isize - ur, (v % cols) as isize - uc))
            .sum();
        for v in 0..m {
            b[v * m + u] = if z > 0.0 {
                at((v / cols) as isize - ur, (v % cols) as isize - uc) / z
            } else if u == v {
                1.0
            } else {
                0.0
            };
        }
    }
    let a = op.outscatter;
    let x: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..100.0)).collect();
    let mul = |mat: &[f64], v: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|i| (0..m).map(|j| mat[i * m + j] * v[j]).sum())
            .collect()
    };
    let bx = mul(&b, &x);
    let y: Vec<f64> = (0..m).map(|i| (1.0 - a) * x[i] + a * bx[i]).collect();
    let plan = SlicePlan::new(&op, rows, cols);
    let s = plan.sharpen(&y);
    let ix_bx: Vec<f64> = (0..m).map(|i| x[i] - bx[i]).collect();
    let b2 = mul(&b, &ix_bx);
    let want: Vec<f64> = (0..m).map(|i| -a * a * (ix_bx[i] - b2[i])).collect();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(*v));
    let bias_err = (0..m)
        .map(|i| ((s[i] - x[i]) - want[i]).abs() / scale)
        .fold(0.0f64, f64::max);
    outcome(
        norm_err <= 1e-6 && exact && idem && energy <= 1e-9 && bias_err <= 1e-9,
        format!(
            "normalization {norm_err:.1e}, interpolation exact: {exact}, band mask idempotent: {idem}, energy {energy:.1e}, bias identity {bias_err:.1e} (outscatter {a:.3})"
        ),
    )
}

/// Reference scene strips stacked vertically, one retroreflector per 48 rows,
/// so the content per pixel stays the same at every height.
fn stacked_frame(
    strips: usize,
    wf: &Waveform,
    luts: &PileupLuts,
) -> (HistogramCube, Calibration, PipelineParams) {
    let strip_rows = 48;
    let mut cfg = SensorConfig::with_dims(strips * strip_rows, 256, 672);
    cfg.pulses_per_frame = 4000;
    let params = ReferenceSceneParams::default();
    let strip = reference_scene(
        &SensorConfig::with_dims(strip_rows, cfg.cols, cfg.bins),
        &params,
    )
    .unwrap();
    let mut scene = SceneSpec::uniform(
        cfg.rows,
        cfg.cols,
        params.wall_depth,
        params.wall_alpha,
        params.beta,
    );
    for k in 0..strips {
        let shift = |r: Rect| Rect::new(r.r0 + k * strip_rows, r.c0, r.r1 + k * strip_rows, r.c1);
        scene.fill_rect(
            shift(strip.target),
            params.target_depth,
            params.target_alpha,
        );
        scene.add_retro(shift(strip.retro), params.retro_depth, params.retro_alpha);
    }
    let atlas = default_atlas(cfg.rows, cfg.cols);
    let ideal = render_ideal_transient(&scene, wf, &cfg).unwrap();
    let glared = apply_glare(&ideal, &atlas, &cfg).unwrap();
    let cube = simulate_spad_frames(&glared, &cfg, 50, 3).unwrap();
    let pparams = PipelineParams::for_sensor(&cfg, wf);
    let cal = Calibration::new(wf.clone(), luts.clone(), &atlas, pparams.dsp.window).unwrap();
    (cube, cal, pparams)
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn time_run(
    cube: &HistogramCube,
    cal: &Calibration,
    params: &PipelineParams,
    reps: usize,
) -> Duration {
    single_thread(|| {
        median(
            (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(run(cube, cal, params).unwrap());
                    t.elapsed()
                })
                .collect(),
        )
    })
}

// 8. Post-histogram processing time and its scaling with pixel count.
fn performance(full: &SceneRun, wf: &Waveform, luts: &PileupLuts) -> Outcome {
    let t_full = time_run(&full.cube, &full.cal, &full.pparams, 9);
    let pts: Vec<(f64, f64)> = [1usize, 2, 4]
        .iter()
        .map(|&k| {
            let (cube, cal, params) = stacked_frame(k, wf, luts);
            let px = (cube.rows * cube.cols) as f64;
            (px, time_run(&cube, &cal, &params, 7).as_secs_f64())
        })
        .collect();
    let n = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let slope = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let per_px: Vec<String> = pts
        .iter()
        .map(|(x, y)| format!("{:.0} px {:.1} ms", x, 1e3 * y))
        .collect();
    outcome(
        t_full < Duration::from_millis(250) && (0.7..=1.3).contains(&slope),
        format!(
            "192x256x672 reference frame in {:.1} ms single-threaded (median of 9); log-log slope {slope:.3} over stacked scenes ({})",
            1e3 * t_full.as_secs_f64(),
            per_px.join(", ")
        ),
    )
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// 9. Determinism across thread counts and exact file round trips.
fn determinism_and_formats(wf: &Waveform, luts: &PileupLuts) -> Outcome {
    let outputs = |threads: usize| {
        with_threads(threads, || {
            let s = scene_run(48, 64, 1.0, 4000, 50, wf, luts);
            let conf = ConfidenceImage {
                rows: s.cfg.rows,
                cols: s.cfg.cols,
                values: s.out.confidence.winning(),
            };
            (
                io::encode_cube(&s.cube, CountType::U32).unwrap(),
                io::encode_depth(&s.out.depth).unwrap(),
                io::encode_confidence(&conf).unwrap(),
                io::echo_table(
                    &s.out.echoes,
                    &s.out.glare,
                    &s.out.confidence,
                    &s.out.depth.source,
                ),
                s,
            )
        })
    };
    let a = outputs(1);
    let b = outputs(4);
    let c = outputs(4);
    let deterministic =
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3 && b.1 == c.1 && b.3 == c.3;

    let s = &a.4;
    let mut trips = Vec::new();
    for t in [CountType::U16, CountType::U32] {
        let mut cube = s.cube.clone();
        cube.counts
            .iter_mut()
            .for_each(|v| *v = (*v).min(u16::MAX as u32));
        trips.push((
            "SPHC",
            io::decode_cube(&io::encode_cube(&cube, t).unwrap()).unwrap() == cube,
        ));
    }
    // The atlas is stored in single precision; values representable in f32 survive exactly.
    let mut atlas = s.atlas.clone();
    for e in atlas.entries.iter_mut() {
        e.map.iter_mut().for_each(|v| *v = *v as f32 as f64);
        e.outscatter = e.outscatter as f32 as f64;
    }
    let bytes = io::encode_atlas(&atlas).unwrap();
    let back = io::decode_atlas(&bytes).unwrap();
    trips.push((
        "GSFA",
        back.entries == atlas.entries && io::encode_atlas(&back).unwrap() == bytes,
    ));
    let back = io::decode_luts(&io::encode_luts(luts).unwrap()).unwrap();
    trips.push((
        "PLUT",
        back.alpha_grid == luts.alpha_grid
            && back.beta_grid == luts.beta_grid
            && back.lut_gamma == luts.lut_gamma
            && back.lut_mu == luts.lut_mu
            && back.lut_var == luts.lut_var
            && back.window == luts.window,
    ));
    // Pixels without a return are stored as NaN and must keep their bits.
    let mut depth = s.out.depth.clone();
    depth.depth[0] = f32::NAN;
    let back = io::decode_depth(&io::encode_depth(&depth).unwrap()).unwrap();
    trips.push(("DPTH", bits(&back.depth) == bits(&depth.depth)));
    let conf = ConfidenceImage {
        rows: depth.rows,
        cols: depth.cols,
        values: s.out.confidence.winning(),
    };
    let back = io::decode_confidence(&io::encode_confidence(&conf).unwrap()).unwrap();
    trips.push(("CONF", bits(&back.values) == bits(&conf.values)));
    let all = trips.iter().all(|t| t.1);
    let failed: Vec<&str> = trips.iter().filter(|t| !t.1).map(|t| t.0).collect();
    outcome(
        deterministic && all,
        format!(
            "outputs identical across 1 and 4 threads: {deterministic}; round trips exact: {}",
            if all {
                "all five formats".to_string()
            } else {
                format!("failed {failed:?}")
            }
        ),
    )
}

/// Runs every criterion, or only those whose numbers are given as arguments.
fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let cfg = SensorConfig::default();
    let wf = Waveform::gaussian(cfg.bins, 10.0).unwrap();
    let luts = luts_for(&wf, &cfg);
    // The full-size reference run is shared by criteria 5, 6 and 8.
    let full = std::cell::OnceCell::new();
    let full = || full.get_or_init(|| scene_run(cfg.rows, cfg.cols, 1.0, 4000, 50, &wf, &luts));

    let secs = Duration::from_secs;
    let criteria: Vec<(u32, &str, Duration, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (
            1,
            "pileup model vs Monte-Carlo",
            secs(120),
            Box::new(pileup_vs_montecarlo),
        ),
        (
            2,
            "pileup round trip",
            secs(60),
            Box::new(|| pileup_round_trip(&luts, &wf, &cfg)),
        ),
        (
            3,
            "backprojection equivalence",
            secs(30),
            Box::new(backprojection_equivalence),
        ),
        (
            4,
            "confidence semantics",
            secs(5),
            Box::new(confidence_semantics),
        ),
        (
            5,
            "end-to-end glare suppression",
            secs(120),
            Box::new(|| end_to_end(full())),
        ),
        (
            6,
            "photographic baseline under pileup",
            secs(180),
            Box::new(|| photographic_baseline(full(), &wf, &luts)),
        ),
        (
            7,
            "glare spread function algebra",
            secs(30),
            Box::new(gsf_algebra),
        ),
        (
            8,
            "performance",
            secs(120),
            Box::new(|| performance(full(), &wf, &luts)),
        ),
        (
            9,
            "determinism and format round trips",
            secs(120),
            Box::new(|| determinism_and_formats(&wf, &luts)),
        ),
    ];
    let mut failures = 0;
    for (id, name, limit, check) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let t = Instant::now();
        let o = check();
        let el = t.elapsed();
        let pass = o.pass && el <= *limit;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {} ({:.1} s, limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
