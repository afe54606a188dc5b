//! Echo-space glare prediction, binomial confidence and depth selection.

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gsf::GlareOperator;
use crate::pileup::{glare_flux_to_expected_counts, CorrectedEcho, CorrectedEchoSet, PileupLuts};
use crate::waveform::Waveform;

/// Fraction of a pulse shifted by `dt` bins that falls inside a fitting window
/// of `window` bins.
///
/// The overlap is piecewise linear in `dt`. For integer windows all its kinks
/// share one fractional phase, so a table with nodes on that phase is exact
/// under linear interpolation. Fractional windows are evaluated directly.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    /// Shift of the first node.
    first: f64,
    values: Vec<f64>,
    /// Open interval of shifts with nonzero overlap.
    support: (f64, f64),
    /// Taps and half window for direct evaluation.
    direct: Option<(Vec<(isize, f64)>, f64)>,
}

fn window_weight(x: f64, half: f64) -> f64 {
    ((x + 0.5).min(half) - (x - 0.5).max(-half)).clamp(0.0, 1.0)
}

fn overlap_from_taps(taps: &[(isize, f64)], half: f64, dt: f64) -> f64 {
    taps.iter()
        .map(|&(k, v)| v * window_weight(k as f64 + dt, half))
        .sum()
}

/// Overlap evaluated directly for an arbitrary shift.
pub fn temporal_overlap(dt: f64, window: f64, wf: &Waveform) -> f64 {
    overlap_from_taps(wf.taps(), window / 2.0, dt)
}

impl OverlapTable {
    pub fn new(wf: &Waveform, window: f64) -> Result<Self> {
        if !(window >= 1.0) || !window.is_finite() {
            return Err(Error::Config(format!(
                "fitting window {window} is shorter than one bin"
            )));
        }
        let half = window / 2.0;
        let lo = wf.taps().first().map_or(0, |t| t.0) as f64;
        let hi = wf.taps().last().map_or(0, |t| t.0) as f64;
        let support = (-hi - half - 0.5, -lo + half + 0.5);
        if window.fract() != 0.0 {
            return Ok(Self {
                first: support.0,
                values: Vec::new(),
                support,
                direct: Some((wf.taps().to_vec(), half)),
            });
        }
        let n = (support.1 - support.0).round() as usize;
        let values = (0..=n)
            .map(|i| temporal_overlap(support.0 + i as f64, window, wf))
            .collect();
        Ok(Self {
            first: support.0,
            values,
            support,
            direct: None,
        })
    }

    #[inline]
    pub fn at(&self, dt: f64) -> f64 {
        if let Some((taps, half)) = &self.direct {
            if !(dt > self.support.0 && dt < self.support.1) {
                return 0.0;
            }
            return overlap_from_taps(taps, *half, dt);
        }
        // Both end nodes are zero, so clamping replaces the support test.
        let last = self.values.len() - 1;
        let x = (dt - self.first).max(0.0).min(last as f64);
        let i = (x as usize).min(last - 1);
        let f = x - i as f64;
        (1.0 - f) * self.values[i] + f * self.values[i + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlareSource {
    /// Pileup-corrected photons per frame, `alpha_hat * N`.
    #[default]
    CorrectedIntensity,
    /// Detected-equivalent photons per frame, `gamma' * N`.
    DetectedEquivalent,
}

impl GlareSource {
    fn strength(&self, e: &CorrectedEcho, pulses: f64) -> f64 {
        match self {
            GlareSource::CorrectedIntensity => e.total_energy,
            GlareSource::DetectedEquivalent => e.gamma_prime * pulses,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeglareParams {
    pub window: f64,
    pub source: GlareSource,
    /// Aggressors must be able to put at least this many photons on one neighbour.
    pub aggressor_floor: f64,
    pub pileup_threshold: f64,
    pub five_sigma_gate: f64,
    pub sigmoid_t: f64,
    pub conf_cap: f64,
    /// Add the window background to the expected glare before scoring.
    pub confidence_background: bool,
    pub range_per_bin: f64,
}

impl DeglareParams {
    pub fn new(window: f64, range_per_bin: f64) -> Self {
        Self {
            window,
            source: GlareSource::default(),
            aggressor_floor: 1.0,
            pileup_threshold: 0.05,
            five_sigma_gate: 5.0,
            sigmoid_t: 90.0,
            conf_cap: 1e6,
            confidence_background: true,
            range_per_bin,
        }
    }
}

/// Predicted glare photons per frame for every echo.
#[derive(Debug, Clone, PartialEq)]
pub struct GlarePrediction {
    pub g_bar: Vec<Vec<f64>>,
}

/// `a - b` wrapped into `(-bins/2, bins/2]` for times already inside `[0, bins)`.
fn circular_dt(a: f64, b: f64, bins: f64) -> f64 {
    let d = a - b;
    if d > bins / 2.0 {
        d - bins
    } else if d <= -bins / 2.0 {
        d + bins
    } else {
        d
    }
}

/// Backprojects aggressor echoes through the glare operator with temporal overlap,
/// excluding each pixel's own echoes.
pub fn predict_glare(
    echoes: &CorrectedEchoSet,
    op: &GlareOperator,
    overlap: &OverlapTable,
    params: &DeglareParams,
) -> Result<GlarePrediction> {
    if (op.rows(), op.cols()) != (echoes.rows, echoes.cols) {
        return Err(Error::Config(format!(
            "glare atlas covers {}x{} but the echoes are {}x{}",
            op.rows(),
            op.cols(),
            echoes.rows,
            echoes.cols
        )));
    }
    let pulses = echoes.pulses as f64;
    let bins = echoes.bins as f64;
    let cols = echoes.cols;
    let min_strength = if op.peak_coefficient() > 0.0 {
        params.aggressor_floor / op.peak_coefficient()
    } else {
        f64::INFINITY
    };
    let aggressors: Vec<(usize, Vec<(f64, f64)>)> = echoes
        .echoes
        .iter()
        .enumerate()
        .filter_map(|(p, px)| {
            let strong: Vec<(f64, f64)> = px
                .iter()
                .map(|e| (e.mean_corrected, params.source.strength(e, pulses)))
                .filter(|(_, y)| *y > 0.0 && *y >= min_strength)
                .collect();
            (!strong.is_empty()).then_some((p, strong))
        })
        .collect();
    // Victim times in one flat array so the scatter loop stays in cache.
    let mut start = Vec::with_capacity(echoes.echoes.len() + 1);
    start.push(0);
    let mut times = Vec::new();
    for px in &echoes.echoes {
        times.extend(px.iter().map(|e| e.mean_corrected));
        start.push(times.len());
    }
    let mut flat = vec![0.0; times.len()];
    for (p, strong) in &aggressors {
        let src = (p / cols, p % cols);
        let col = op.column(src)?;
        if col.outscatter == 0.0 {
            continue;
        }
        let base = col.row_lo * cols;
        for (k, v) in col.values.iter().enumerate() {
            let a = col.outscatter * v;
            let u = base + k;
            if a == 0.0 || u == *p {
                continue;
            }
            for (t_victim, g) in times[start[u]..start[u + 1]]
                .iter()
                .zip(&mut flat[start[u]..start[u + 1]])
            {
                for &(t_src, y) in strong {
                    *g += a * overlap.at(circular_dt(t_src, *t_victim, bins)) * y;
                }
            }
        }
    }
    let g_bar = start
        .windows(2)
        .map(|w| flat[w[0]..w[1]].to_vec())
        .collect();
    Ok(GlarePrediction { g_bar })
}

/// Negative log binomial probability of `y` detections in `n` trials when
/// `y` is at least the expected `n * p`, and zero otherwise.
pub fn binomial_confidence(y: f64, n: f64, p: f64, cap: f64) -> Result<f64> {
    if !(y >= 0.0) || y > n {
        return Err(Error::Input(format!("detections {y} outside [0, {n}]")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(if y > 0.0 { cap } else { 0.0 });
    }
    if y < n * p {
        return Ok(0.0);
    }
    let tail = if y < n { (n - y) * (-p).ln_1p() } else { 0.0 };
    let ln_p = ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0) + y * p.ln() + tail;
    Ok((-ln_p).clamp(0.0, cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Clean,
    Deglared,
    Fallback,
    NoReturn,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Clean => "clean",
            SourceTag::Deglared => "deglared",
            SourceTag::Fallback => "fallback",
            SourceTag::NoReturn => "no-return",
        }
    }
}

/// Per-pixel depth in meters; NaN marks pixels without a return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub rows: usize,
    pub cols: usize,
    pub depth: Vec<f32>,
    pub source: Vec<SourceTag>,
}

impl DepthMap {
    pub fn no_return(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            depth: vec![f32::NAN; rows * cols],
            source: vec![SourceTag::NoReturn; rows * cols],
        }
    }

    pub fn from_meters(rows: usize, cols: usize, depth: Vec<f32>) -> Self {
        let source = depth
            .iter()
            .map(|d| {
                if d.is_nan() {
                    SourceTag::NoReturn
                } else {
                    SourceTag::Clean
                }
            })
            .collect();
        Self {
            rows,
            cols,
            depth,
            source,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f32> {
        let d = self.depth[r * self.cols + c];
        (!d.is_nan()).then_some(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub rows: usize,
    pub cols: usize,
    pub c: Vec<Vec<f64>>,
    /// Expected glare detections per frame for each echo.
    pub expected_glare: Vec<Vec<f64>>,
    /// Echoes that failed the background gate.
    pub gated: Vec<Vec<bool>>,
    pub chosen: Vec<Option<usize>>,
}

impl ConfidenceMap {
    /// Confidence of each pixel's selected echo; NaN where nothing was selected.
    pub fn winning(&self) -> Vec<f32> {
        self.chosen
            .iter()
            .zip(&self.c)
            .map(|(k, c)| k.map_or(f32::NAN, |k| c[k] as f32))
            .collect()
    }
}

fn background_gate(e: &CorrectedEcho, params: &DeglareParams) -> (f64, bool) {
    let eta = e.base.background * params.window;
    let pass = e.base.counts >= eta + params.five_sigma_gate * eta.sqrt();
    (eta, pass)
}

/// Confidence of every echo against its expected glare and background.
pub fn confidence_map(
    echoes: &CorrectedEchoSet,
    glare: &GlarePrediction,
    luts: &PileupLuts,
    params: &DeglareParams,
) -> Result<ConfidenceMap> {
    let n = echoes.pulses as f64;
    let scored: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = echoes
        .echoes
        .par_iter()
        .zip(&glare.g_bar)
        .map(|(px, gb)| -> Result<_> {
            let mut c = Vec::with_capacity(px.len());
            let mut expected = Vec::with_capacity(px.len());
            let mut gated = Vec::with_capacity(px.len());
            for (e, g) in px.iter().zip(gb) {
                let big_g = glare_flux_to_expected_counts(
                    g / n,
                    e.beta_hat,
                    luts,
                    echoes.pulses,
                    params.pileup_threshold,
                );
                let (eta, pass) = background_gate(e, params);
                let p = if params.confidence_background {
                    big_g + eta
                } else {
                    big_g
                } / n;
                let y = e.base.counts.min(n);
                let conf = if y < big_g {
                    0.0
                } else {
                    binomial_confidence(y, n, p.clamp(0.0, 1.0), params.conf_cap)?
                };
                c.push(conf);
                expected.push(big_g);
                gated.push(!pass);
            }
            Ok((c, expected, gated))
        })
        .collect::<Result<_>>()?;
    let mut map = ConfidenceMap {
        rows: echoes.rows,
        cols: echoes.cols,
        c: Vec::with_capacity(scored.len()),
        expected_glare: Vec::with_capacity(scored.len()),
        gated: Vec::with_capacity(scored.len()),
        chosen: vec![None; scored.len()],
    };
    for (c, g, x) in scored {
        map.c.push(c);
        map.expected_glare.push(g);
        map.gated.push(x);
    }
    Ok(map)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Picks the most confident echo per pixel, falling back to the echo
/// furthest above its expected glare when no echo is confidently above it.
pub fn select_depth(
    echoes: &CorrectedEchoSet,
    glare: &GlarePrediction,
    conf: &mut ConfidenceMap,
    params: &DeglareParams,
) -> DepthMap {
    let mut out = DepthMap::no_return(echoes.rows, echoes.cols);
    for p in 0..echoes.echoes.len() {
        let px = &echoes.echoes[p];
        let alive: Vec<usize> = (0..px.len()).filter(|&k| !conf.gated[p][k]).collect();
        if alive.is_empty() {
            conf.chosen[p] = None;
            continue;
        }
        let best_conf = alive
            .iter()
            .copied()
            .filter(|&k| conf.c[p][k] > 0.0)
            .max_by(|&a, &b| conf.c[p][a].total_cmp(&conf.c[p][b]).then(b.cmp(&a)));
        let (k, tag) = match best_conf {
            Some(k) => {
                let glare_free = glare.g_bar[p].iter().all(|g| *g == 0.0);
                (
                    k,
                    if glare_free {
                        SourceTag::Clean
                    } else {
                        SourceTag::Deglared
                    },
                )
            }
            None => {
                let score = |k: usize| {
                    sigmoid((px[k].base.counts - conf.expected_glare[p][k]) / params.sigmoid_t)
                };
                let k = alive
                    .iter()
                    .copied()
                    .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
                    .expect("alive is not empty");
                (k, SourceTag::Fallback)
            }
        };
        conf.chosen[p] = Some(k);
        out.depth[p] = (px[k].mean_corrected * params.range_per_bin) as f32;
        out.source[p] = tag;
    }
    out
}

/// Depth of the brightest echo that clears the background gate, ignoring glare.
pub fn brightest_depth(echoes: &CorrectedEchoSet, params: &DeglareParams) -> DepthMap {
    let mut out = DepthMap::no_return(echoes.rows, echoes.cols);
    for (p, px) in echoes.echoes.iter().enumerate() {
        if let Some(e) = px.first() {
            if background_gate(e, params).1 {
                out.depth[p] = (e.mean_corrected * params.range_per_bin) as f32;
                out.source[p] = SourceTag::Clean;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_cases() {
        let narrow = Waveform::gaussian(128, 2.0).unwrap();
        let t = OverlapTable::new(&narrow, 20.0).unwrap();
        assert!((t.at(0.0) - 1.0).abs() < 1e-12);
        assert_eq!(t.at(40.0), 0.0);
        assert_eq!(t.at(-40.0), 0.0);
        let mut shape = vec![0.0; 64];
        for k in -5isize..=5 {
            shape[k.rem_euclid(64) as usize] = 1.0;
        }
        let rect = Waveform::from_shape(shape).unwrap();
        let t = OverlapTable::new(&rect, 11.0).unwrap();
        assert!((t.at(5.5) - 0.5).abs() < 1e-12);
        assert!((t.at(-5.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overlap_table_is_exact_between_nodes() {
        let wf = Waveform::gaussian(96, 4.0).unwrap();
        for window in [8.0, 11.0, 20.0, 7.5] {
            let t = OverlapTable::new(&wf, window).unwrap();
            for i in -400..400 {
                let dt = i as f64 * 0.0637;
                let direct = temporal_overlap(dt, window, &wf);
                assert!((t.at(dt) - direct).abs() < 1e-13, "window {window} dt {dt}");
            }
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(binomial_confidence(0.0, 100.0, 0.1, 1e6).unwrap(), 0.0);
        let c = binomial_confidence(1.0, 10.0, 0.1, 1e6).unwrap();
        let direct = -(10.0 * 0.1 * 0.9f64.powi(9)).ln();
        assert!((c - direct).abs() < 1e-9);
        assert!((c - 0.9482).abs() < 1e-4);
        assert_eq!(binomial_confidence(3.0, 10.0, 0.0, 1e6).unwrap(), 1e6);
        assert_eq!(binomial_confidence(0.0, 10.0, 0.0, 1e6).unwrap(), 0.0);
        assert!(binomial_confidence(11.0, 10.0, 0.5, 1e6).is_err());
    }

    #[test]
    fn confidence_is_monotone_above_expectation() {
        for &(n, p) in &[(50.0f64, 0.2f64), (1000.0, 0.013), (7.0, 0.5)] {
            let mut prev = 0.0;
            let start = (n * p).ceil() as u64;
            for y in start..=n as u64 {
                let c = binomial_confidence(y as f64, n, p, 1e6).unwrap();
                assert!(c >= prev - 1e-9, "n={n} p={p} y={y}");
                prev = c;
            }
        }
    }

    use crate::dsp::Echo;
    use crate::gsf::GsfAtlas;
    use crate::synth::{synthetic_atlas, SyntheticAtlasParams};

    pub(crate) fn echo(
        row: usize,
        col: usize,
        counts: f64,
        mean: f64,
        pulses: f64,
    ) -> CorrectedEcho {
        CorrectedEcho {
            base: Echo {
                row,
                col,
                peak_bin: mean.round() as usize,
                peak_height: counts,
                counts,
                mean_tof: mean,
                var_tof: 10.0,
                background: 0.0,
                background_raw: 0.0,
                degenerate: false,
            },
            alpha_hat: counts / pulses,
            mean_corrected: mean,
            total_energy: counts,
            gamma_prime: counts / pulses,
            beta_hat: 0.0,
            pileup_applied: false,
            saturated: false,
        }
    }

    fn set(
        rows: usize,
        cols: usize,
        pulses: u64,
        echoes: Vec<Vec<CorrectedEcho>>,
    ) -> CorrectedEchoSet {
        CorrectedEchoSet {
            rows,
            cols,
            bins: 200,
            pulses,
            echoes,
        }
    }

    fn small_atlas() -> GsfAtlas {
        synthetic_atlas(
            6,
            8,
            &SyntheticAtlasParams {
                grid: 2,
                falloff: 3.0,
                ..Default::default()
            },
        )
        .unwrap()
        .with_band(Some(3))
    }

    #[test]
    fn self_echo_gets_no_glare() {
        let op = GlareOperator::new(&small_atlas()).unwrap();
        let wf = Waveform::gaussian(200, 4.0).unwrap();
        let ov = OverlapTable::new(&wf, 8.0).unwrap();
        let mut px = vec![Vec::new(); 48];
        px[10] = vec![echo(1, 2, 5e4, 40.0, 1e5)];
        let params = DeglareParams::new(8.0, 1.0);
        let g = predict_glare(&set(6, 8, 100_000, px), &op, &ov, &params).unwrap();
        assert_eq!(g.g_bar[10], vec![0.0]);
    }

    #[test]
    fn aligned_aggressor_spreads_outscatter() {
        let op = GlareOperator::new(&small_atlas()).unwrap();
        let wf = Waveform::gaussian(200, 4.0).unwrap();
        let ov = OverlapTable::new(&wf, 16.0).unwrap();
        let y = 5e4;
        let mut px = vec![Vec::new(); 48];
        px[2 * 8 + 3] = vec![echo(2, 3, y, 40.0, 1e5)];
        px[3 * 8 + 5] = vec![echo(3, 5, 10.0, 40.0, 1e5)];
        let params = DeglareParams::new(16.0, 1.0);
        let g = predict_glare(&set(6, 8, 100_000, px), &op, &ov, &params).unwrap();
        let a = op.column((2, 3)).unwrap().coefficient(3, 5);
        let o = temporal_overlap(0.0, 16.0, &wf);
        assert!((g.g_bar[3 * 8 + 5][0] - a * o * y).abs() < 1e-9 * a * y);
        assert!((o - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_linear_in_intensity() {
        let op = GlareOperator::new(&small_atlas()).unwrap();
        let wf = Waveform::gaussian(200, 4.0).unwrap();
        let ov = OverlapTable::new(&wf, 8.0).unwrap();
        let build = |scale: f64| {
            let px: Vec<Vec<CorrectedEcho>> = (0..48)
                .map(|p| {
                    vec![
                        echo(
                            p / 8,
                            p % 8,
                            scale * (1e3 + 97.0 * p as f64),
                            30.0 + (p % 5) as f64,
                            1e5,
                        ),
                        echo(p / 8, p % 8, scale * 300.0, 70.0 - (p % 3) as f64, 1e5),
                    ]
                })
                .collect();
            set(6, 8, 100_000, px)
        };
        let mut params = DeglareParams::new(8.0, 1.0);
        params.aggressor_floor = 0.0;
        let g1 = predict_glare(&build(1.0), &op, &ov, &params).unwrap();
        let g2 = predict_glare(&build(2.0), &op, &ov, &params).unwrap();
        for (a, b) in g1.g_bar.iter().flatten().zip(g2.g_bar.iter().flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let op = GlareOperator::new(&small_atlas()).unwrap();
        let wf = Waveform::gaussian(200, 4.0).unwrap();
        let ov = OverlapTable::new(&wf, 8.0).unwrap();
        let err = predict_glare(
            &set(5, 8, 1000, vec![Vec::new(); 40]),
            &op,
            &ov,
            &DeglareParams::new(8.0, 1.0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn luts() -> PileupLuts {
        let wf = Waveform::gaussian(200, 4.0).unwrap();
        let a = crate::pileup::log_grid(1e-3, 10.0, 12);
        let b = crate::pileup::linear_grid(0.0, 2.0, 3);
        crate::pileup::build_luts(&wf, &a, &b, 8, 20, 200).unwrap()
    }

    fn select(px: Vec<CorrectedEcho>, g: Vec<f64>) -> (DepthMap, ConfidenceMap) {
        let s = set(1, 1, 10_000, vec![px]);
        let glare = GlarePrediction { g_bar: vec![g] };
        let params = DeglareParams::new(8.0, 0.5);
        let mut conf = confidence_map(&s, &glare, &luts(), &params).unwrap();
        let d = select_depth(&s, &glare, &mut conf, &params);
        (d, conf)
    }

    #[test]
    fn clean_echo_is_kept() {
        let (d, conf) = select(vec![echo(0, 0, 200.0, 40.0, 1e4)], vec![0.0]);
        assert_eq!(d.source[0], SourceTag::Clean);
        assert_eq!(d.depth[0], 20.0);
        assert_eq!(conf.chosen[0], Some(0));
    }

    #[test]
    fn glare_echo_loses_to_real_surface() {
        let ghost = echo(0, 0, 300.0, 40.0, 1e4);
        let real = echo(0, 0, 120.0, 90.0, 1e4);
        let (d, conf) = select(vec![ghost, real], vec![300.0, 0.5]);
        assert_eq!(conf.chosen[0], Some(1));
        assert_eq!(d.source[0], SourceTag::Deglared);
        assert_eq!(d.depth[0], 45.0);
    }

    #[test]
    fn sub_glare_echoes_fall_back_to_margin() {
        let a = echo(0, 0, 300.0, 40.0, 1e4);
        let b = echo(0, 0, 100.0, 90.0, 1e4);
        let (d, conf) = select(vec![a, b], vec![400.0, 150.0]);
        assert_eq!(conf.c[0], vec![0.0, 0.0]);
        assert_eq!(conf.chosen[0], Some(1));
        assert_eq!(d.source[0], SourceTag::Fallback);
    }

    #[test]
    fn weak_echoes_are_gated() {
        let mut e = echo(0, 0, 30.0, 40.0, 1e4);
        e.base.background = 2.0;
        let (d, conf) = select(vec![e], vec![0.0]);
        assert_eq!(conf.chosen[0], None);
        assert_eq!(d.source[0], SourceTag::NoReturn);
        assert!(d.depth[0].is_nan());
    }
}
