use rayon::prelude::*;

use crate::dsp::{refine_peak, window_moments, Echo, EchoSet, MatchedFilter};
use crate::error::{Error, Result};
use crate::sensor::censor_window;
use crate::waveform::Waveform;

/// Per-pulse detection probability of every bin under dead-time censoring.
///
/// `q[i] = (1 - exp(-flux[i])) * exp(-sum of flux over the preceding window)`,
/// with the preceding window wrapping across the pulse period. The product is
/// formed in the log domain.
pub fn forward_q(flux: &[f64], dead_time: usize, q: &mut [f64]) {
    let n = flux.len();
    let l = censor_window(dead_time, n);
    let mut window: f64 = (1..=l).map(|m| flux[(n - m % n) % n]).sum();
    for i in 0..n {
        let lam = flux[i];
        q[i] = if lam > 0.0 {
            ((-(-lam).exp_m1()).ln() - window.max(0.0)).exp()
        } else {
            0.0
        };
        if l > 0 {
            window += lam - flux[(i + n - l) % n];
        }
    }
}

/// Detection probabilities for a single pulse of strength `alpha` at integer
/// `depth_bin` over a uniform background totalling `beta` photons per pulse.
pub fn pileup_forward_q(
    alpha: f64,
    beta: f64,
    wf: &Waveform,
    depth_bin: usize,
    dead_time: usize,
    bins: usize,
) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::Input("alpha and beta must be nonnegative".into()));
    }
    if wf.bins() != bins {
        return Err(Error::Dimension(format!(
            "waveform has {} bins, expected {bins}",
            wf.bins()
        )));
    }
    let mut flux = vec![beta / bins as f64; bins];
    wf.render_into(&mut flux, depth_bin as f64, alpha);
    let mut q = vec![0.0; bins];
    forward_q(&flux, dead_time, &mut q);
    Ok(q)
}

/// Window statistics of a noiseless return, tabulated over signal and background strength.
#[derive(Debug, Clone, PartialEq)]
pub struct PileupLuts {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Expected detections per pulse inside the window, indexed `[a * n_beta + b]`.
    pub lut_gamma: Vec<f64>,
    /// Mean shift in bins that undoes the range walk.
    pub lut_mu: Vec<f64>,
    /// Window variance in bins squared.
    pub lut_var: Vec<f64>,
    pub window: u32,
    pub waveform_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntensityEstimator {
    /// Invert the window variance only.
    Variance,
    /// Invert the detected energy only.
    Energy,
    /// Use whichever table is better conditioned at the measured point.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub alpha: f64,
    pub saturated: bool,
    /// Whether the window variance, rather than the energy, fixed `alpha`.
    pub by_variance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedEcho {
    pub base: Echo,
    pub alpha_hat: f64,
    pub mean_corrected: f64,
    /// Recovered photons per frame, `alpha_hat * pulses`.
    pub total_energy: f64,
    /// Expected detections per pulse for the recovered intensity.
    pub gamma_prime: f64,
    pub beta_hat: f64,
    pub pileup_applied: bool,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionParams {
    pub pulses: u64,
    pub bins: usize,
    /// Detections per pulse above which the pileup correction is applied.
    pub threshold: f64,
    pub estimator: IntensityEstimator,
    /// Dead time in bins, used to recover the background from its censored rate.
    pub dead_time: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedEchoSet {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub pulses: u64,
    pub echoes: Vec<Vec<CorrectedEcho>>,
}

/// Default grids: 200 log-spaced signal levels in [1e-3, 100] and 32 background levels in [0, 10].
pub fn default_grids() -> (Vec<f64>, Vec<f64>) {
    (log_grid(1e-3, 100.0, 200), linear_grid(0.0, 10.0, 32))
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    g[0] = lo;
    g[n - 1] = hi;
    g
}

pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} grid is empty")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "{name} grid must be finite, nonnegative and strictly increasing"
        )));
    }
    Ok(())
}

/// Peak location and window moments as the echo extractor would measure them.
fn measured_moments(hist: &[f64], mf: &MatchedFilter, window: f64) -> (f64, f64, f64) {
    let f = mf.apply_f64(hist);
    let peak = (0..f.len())
        .max_by(|a, b| f[*a].total_cmp(&f[*b]).then(b.cmp(a)))
        .unwrap_or(0);
    let c = refine_peak(&f, peak);
    let m = window_moments(hist, c, window);
    (m.counts, m.mean, m.var)
}

pub fn build_luts(
    wf: &Waveform,
    alpha_grid: &[f64],
    beta_grid: &[f64],
    window: u32,
    dead_time: usize,
    bins: usize,
) -> Result<PileupLuts> {
    check_grid("alpha", alpha_grid)?;
    check_grid("beta", beta_grid)?;
    if wf.bins() != bins {
        return Err(Error::Dimension(format!(
            "waveform has {} bins, expected {bins}",
            wf.bins()
        )));
    }
    if window == 0 || window as usize > bins {
        return Err(Error::Config(format!(
            "window {window} must lie in [1, {bins}]"
        )));
    }
    let width = window as f64;
    let depth = bins / 2;
    let mf = MatchedFilter::new(wf);
    let mut kernel = vec![0.0; bins];
    wf.render_into(&mut kernel, depth as f64, 1.0);
    let (_, mu_kernel, _) = measured_moments(&kernel, &mf, width);

    let nb = beta_grid.len();
    let rows: Vec<Vec<(f64, f64, f64)>> = alpha_grid
        .par_iter()
        .map(|&alpha| {
            beta_grid
                .iter()
                .map(|&beta| {
                    let q = pileup_forward_q(alpha, beta, wf, depth, dead_time, bins)
                        .expect("grid values are validated");
                    let (g, m, v) = measured_moments(&q, &mf, width);
                    (g, mu_kernel - m, v)
                })
                .collect()
        })
        .collect();
    let mut luts = PileupLuts {
        alpha_grid: alpha_grid.to_vec(),
        beta_grid: beta_grid.to_vec(),
        lut_gamma: Vec::with_capacity(alpha_grid.len() * nb),
        lut_mu: Vec::with_capacity(alpha_grid.len() * nb),
        lut_var: Vec::with_capacity(alpha_grid.len() * nb),
        window,
        waveform_id: wf.id(),
    };
    for row in rows {
        for (g, m, v) in row {
            luts.lut_gamma.push(g);
            luts.lut_mu.push(m);
            luts.lut_var.push(v);
        }
    }
    luts.check_monotone()?;
    Ok(luts)
}

impl PileupLuts {
    pub fn n_alpha(&self) -> usize {
        self.alpha_grid.len()
    }

    pub fn n_beta(&self) -> usize {
        self.beta_grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("alpha", &self.alpha_grid)?;
        check_grid("beta", &self.beta_grid)?;
        let n = self.n_alpha() * self.n_beta();
        if self.lut_gamma.len() != n || self.lut_mu.len() != n || self.lut_var.len() != n {
            return Err(Error::Dimension(
                "lookup table sizes do not match the grids".into(),
            ));
        }
        Ok(())
    }

    /// Variance must fall strictly with signal strength for every background level.
    pub fn check_monotone(&self) -> Result<()> {
        let nb = self.n_beta();
        for b in 0..nb {
            for a in 1..self.n_alpha() {
                let prev = self.lut_var[(a - 1) * nb + b];
                let cur = self.lut_var[a * nb + b];
                if !(cur < prev) {
                    return Err(Error::Calibration(format!(
                        "window variance is not decreasing between alpha {} and {} at beta {}",
                        self.alpha_grid[a - 1],
                        self.alpha_grid[a],
                        self.beta_grid[b]
                    )));
                }
            }
        }
        Ok(())
    }

    fn beta_bracket(&self, beta: f64) -> (usize, usize, f64) {
        let g = &self.beta_grid;
        let last = g.len() - 1;
        if !(beta >= g[0]) || beta > g[last] {
            log::warn!(
                "background {beta} outside lookup range [{}, {}], clamping",
                g[0],
                g[last]
            );
        }
        let beta = if beta.is_nan() {
            g[0]
        } else {
            beta.clamp(g[0], g[last])
        };
        if last == 0 {
            return (0, 0, 0.0);
        }
        let j = g.partition_point(|v| *v <= beta).clamp(1, last);
        let f = (beta - g[j - 1]) / (g[j] - g[j - 1]);
        (j - 1, j, f)
    }

    fn column(&self, table: &[f64], beta: f64) -> Vec<f64> {
        let (j0, j1, f) = self.beta_bracket(beta);
        let nb = self.n_beta();
        (0..self.n_alpha())
            .map(|a| (1.0 - f) * table[a * nb + j0] + f * table[a * nb + j1])
            .collect()
    }

    fn interp_alpha(&self, col: &[f64], alpha: f64) -> f64 {
        let g = &self.alpha_grid;
        let last = g.len() - 1;
        if alpha <= g[0] || last == 0 {
            return col[0];
        }
        if alpha >= g[last] {
            return col[last];
        }
        let k = g.partition_point(|v| *v <= alpha).clamp(1, last);
        let f = (alpha - g[k - 1]) / (g[k] - g[k - 1]);
        (1.0 - f) * col[k - 1] + f * col[k]
    }

    pub fn gamma_at(&self, alpha: f64, beta: f64) -> f64 {
        self.interp_alpha(&self.column(&self.lut_gamma, beta), alpha)
    }

    pub fn mu_at(&self, alpha: f64, beta: f64) -> f64 {
        self.interp_alpha(&self.column(&self.lut_mu, beta), alpha)
    }

    pub fn var_at(&self, alpha: f64, beta: f64) -> f64 {
        self.interp_alpha(&self.column(&self.lut_var, beta), alpha)
    }

    /// Background-only detections per pulse in the window, extrapolated to zero signal.
    pub fn gamma_background(&self, beta: f64) -> f64 {
        let col = self.column(&self.lut_gamma, beta);
        let g = &self.alpha_grid;
        if g.len() < 2 {
            return col[0];
        }
        let slope = (col[1] - col[0]) / (g[1] - g[0]);
        (col[0] - slope * g[0]).max(0.0)
    }

    /// Signal strength whose tabulated window variance matches `var`.
    pub fn invert_variance(&self, var: f64, beta: f64) -> Inversion {
        let col = self.column(&self.lut_var, beta);
        Inversion {
            by_variance: true,
            ..invert_decreasing(&self.alpha_grid, &col, var)
        }
    }

    /// Signal strength whose tabulated window energy matches `gamma` detections per pulse.
    pub fn invert_energy(&self, gamma: f64, beta: f64) -> Inversion {
        let col = self.column(&self.lut_gamma, beta);
        let neg: Vec<f64> = col.iter().map(|v| -v).collect();
        invert_decreasing(&self.alpha_grid, &neg, -gamma)
    }

    /// Local log-log slope of a table column at `alpha`.
    fn log_slope(&self, col: &[f64], alpha: f64) -> f64 {
        let g = &self.alpha_grid;
        let last = g.len() - 1;
        if last == 0 {
            return 0.0;
        }
        let k = g.partition_point(|v| *v <= alpha).clamp(1, last);
        let (a, b) = (
            col[k - 1].abs().max(f64::MIN_POSITIVE),
            col[k].abs().max(f64::MIN_POSITIVE),
        );
        ((b.ln() - a.ln()) / (g[k].ln() - g[k - 1].ln())).abs()
    }

    fn estimate_alpha(
        &self,
        echo: &Echo,
        pulses: f64,
        beta: f64,
        estimator: IntensityEstimator,
    ) -> Inversion {
        let by_var = || self.invert_variance(echo.var_tof, beta);
        let by_energy = || self.invert_energy(echo.counts / pulses, beta);
        match estimator {
            IntensityEstimator::Variance => by_var(),
            IntensityEstimator::Energy => by_energy(),
            IntensityEstimator::Auto => {
                let e = by_energy();
                if e.saturated {
                    return by_var();
                }
                // Relative noise on the energy is about 1/sqrt(Y) and on a
                // near-Gaussian variance sqrt(2/Y), so compare the slopes with that weight.
                let s_g = self.log_slope(&self.column(&self.lut_gamma, beta), e.alpha);
                let s_v = self.log_slope(&self.column(&self.lut_var, beta), e.alpha);
                if s_g * std::f64::consts::SQRT_2 >= s_v {
                    e
                } else {
                    by_var()
                }
            }
        }
    }
}

fn invert_decreasing(grid: &[f64], col: &[f64], value: f64) -> Inversion {
    let last = col.len() - 1;
    if value >= col[0] {
        return Inversion {
            alpha: 0.0,
            saturated: false,
            by_variance: false,
        };
    }
    if value <= col[last] {
        return Inversion {
            alpha: grid[last],
            saturated: true,
            by_variance: false,
        };
    }
    let k = col.partition_point(|v| *v > value).clamp(1, last);
    let f = (col[k - 1] - value) / (col[k - 1] - col[k]);
    Inversion {
        alpha: grid[k - 1] + f * (grid[k] - grid[k - 1]),
        saturated: false,
        by_variance: false,
    }
}

/// Background photons per pulse whose censored detection rate matches the
/// measured per-bin background.
pub fn beta_from_background(per_bin: f64, pulses: u64, dead_time: usize, bins: usize) -> f64 {
    if !(per_bin > 0.0) {
        return 0.0;
    }
    let l = censor_window(dead_time, bins) as f64;
    let p = per_bin / pulses as f64;
    let rate = |x: f64| -(-x).exp_m1() * (-l * x).exp();
    let x_max = if l > 0.0 { (1.0 + 1.0 / l).ln() } else { 50.0 };
    if p >= rate(x_max) {
        return x_max * bins as f64;
    }
    // Newton steps kept inside a shrinking bracket; the rate is increasing on [0, x_max].
    let slope = |x: f64| (-l * x).exp() * ((-x).exp() + l * (-x).exp_m1());
    let (mut lo, mut hi) = (0.0, x_max);
    let mut x = p.min(0.5 * x_max);
    for _ in 0..100 {
        let f = rate(x) - p;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = slope(x);
        let mut next = if d > 0.0 { x - f / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x || hi - lo <= 1e-15 * hi {
            x = next;
            break;
        }
        x = next;
    }
    x * bins as f64
}

pub fn correct_echo(
    echo: &Echo,
    beta_hat: f64,
    luts: &PileupLuts,
    params: &CorrectionParams,
) -> CorrectedEcho {
    correct_echo_with(echo, beta_hat, luts, params, None)
}

/// As [`correct_echo`], optionally refining the table estimate with the
/// forward model evaluated at the echo's own sub-bin position.
pub fn correct_echo_with(
    echo: &Echo,
    beta_hat: f64,
    luts: &PileupLuts,
    params: &CorrectionParams,
    model: Option<&ReturnModel>,
) -> CorrectedEcho {
    let pulses = params.pulses as f64;
    let rate = echo.counts / pulses;
    if rate <= params.threshold || echo.degenerate {
        return CorrectedEcho {
            base: echo.clone(),
            alpha_hat: rate,
            mean_corrected: echo.mean_tof,
            total_energy: rate * pulses,
            gamma_prime: rate,
            beta_hat,
            pileup_applied: false,
            saturated: false,
        };
    }
    let inv = luts.estimate_alpha(echo, pulses, beta_hat, params.estimator);
    if inv.saturated {
        log::warn!(
            "pixel ({}, {}): echo intensity beyond lookup range, using {}",
            echo.row,
            echo.col,
            inv.alpha
        );
    }
    let bins = params.bins as f64;
    let mut alpha = inv.alpha;
    let mut mean = echo.mean_tof + luts.mu_at(inv.alpha, beta_hat);
    let mut gamma = luts.gamma_at(inv.alpha, beta_hat);
    if let Some(m) = model.filter(|_| !inv.saturated && inv.alpha > 0.0) {
        (alpha, mean, gamma) = m.refine(echo, pulses, beta_hat, luts, inv, mean);
    }
    if !(0.0..bins).contains(&mean) {
        log::warn!(
            "pixel ({}, {}): corrected mean {mean} outside the histogram, clamping",
            echo.row,
            echo.col
        );
        mean = mean.clamp(0.0, bins - 1e-9);
    }
    CorrectedEcho {
        base: echo.clone(),
        alpha_hat: alpha,
        mean_corrected: mean,
        total_energy: alpha * pulses,
        gamma_prime: gamma,
        beta_hat,
        pileup_applied: true,
        saturated: inv.saturated,
    }
}

/// Noiseless window statistics of a single return at any sub-bin depth.
///
/// The tables are built with the pulse on a bin center. Under strong pileup
/// the detections crowd into one or two bins, so the window variance also
/// depends on where the pulse falls inside its bin; evaluating the forward
/// model at the echo's estimated depth removes that dependence.
#[derive(Debug, Clone)]
pub struct ReturnModel {
    wf: Waveform,
    mf: MatchedFilter,
    dead_time: usize,
    bins: usize,
    window: f64,
    /// Bins on either side of the pulse the local evaluation covers.
    reach: usize,
}

/// Window statistics of a model return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnMoments {
    pub gamma: f64,
    /// Undistorted mean minus detected mean, in bins.
    pub shift: f64,
    pub var: f64,
}

impl ReturnModel {
    pub fn new(wf: &Waveform, dead_time: usize, window: u32) -> Self {
        let taps = wf.taps();
        Self {
            wf: wf.clone(),
            mf: MatchedFilter::new(wf),
            dead_time,
            bins: wf.bins(),
            window: window as f64,
            // The filtered peak of a piled-up return stays on the pulse support.
            reach: taps.iter().map(|t| t.0.unsigned_abs()).max().unwrap_or(0) + 2,
        }
    }

    /// Moments of the pulse of strength `alpha` at `depth` over background `beta`.
    pub fn moments(&self, alpha: f64, beta: f64, depth: f64) -> ReturnMoments {
        let (g, mq, v) = self.measure(alpha, beta, depth, true);
        let (_, ml, _) = self.measure(1.0, 0.0, depth, false);
        ReturnMoments {
            gamma: g,
            shift: circular_diff(ml, mq, self.bins as f64),
            var: v,
        }
    }

    /// Peak-centered window moments of the detection probabilities, or of the
    /// flux itself when `detect` is false, evaluated on a stretch of bins around the pulse.
    fn measure(&self, alpha: f64, beta: f64, depth: f64, detect: bool) -> (f64, f64, f64) {
        let n = self.bins;
        let l = censor_window(self.dead_time, n);
        let base = depth.floor() as isize;
        // Filter outputs over [base - reach, base + reach], which read q up to
        // the filter span beyond, which in turn depends on the l bins before that.
        let first_tap = self.wf.taps().first().map(|t| t.0).unwrap_or(0);
        let last_tap = self.wf.taps().last().map(|t| t.0).unwrap_or(0);
        let r = self.reach as isize;
        // The moment window must also fit, so pad by half of it either side.
        let half = (self.window / 2.0).ceil() as isize + 1;
        let q_lo = base - r + first_tap.min(-half);
        let q_hi = base + r + last_tap.max(half) + 1;
        let start = q_lo - l as isize;
        let len = (q_hi - start + 1) as usize;
        if len + 2 >= n {
            return self.measure_full(alpha, beta, depth, detect);
        }
        let bg = beta / n as f64;
        let mut flux = vec![bg; len];
        let frac = depth - depth.floor();
        for &(k, v) in self.wf.taps() {
            let i = (base + k - start) as usize;
            flux[i] += (1.0 - frac) * alpha * v;
            if frac > 0.0 {
                flux[i + 1] += frac * alpha * v;
            }
        }
        let mut window: f64 = flux[..l].iter().sum();
        let mut q = vec![0.0; len - l];
        for (j, qj) in q.iter_mut().enumerate() {
            let i = j + l;
            let lam = flux[i];
            *qj = if !detect {
                lam
            } else if lam > 0.0 {
                ((-(-lam).exp_m1()).ln() - window.max(0.0)).exp()
            } else {
                0.0
            };
            if l > 0 {
                window += lam - flux[i - l];
            }
        }
        // q[j] is bin q_lo + j.
        let outs = (2 * r + 1) as usize;
        let mut f = vec![0.0; outs];
        for &(k, w) in self.wf.taps() {
            let off = (base - r + k - q_lo) as usize;
            for (o, h) in f.iter_mut().zip(&q[off..off + outs]) {
                *o += w * h;
            }
        }
        let peak = (0..outs)
            .max_by(|a, b| f[*a].total_cmp(&f[*b]).then(b.cmp(a)))
            .unwrap_or(0);
        let c = refine_peak_local(&f, peak);
        let m = window_moments(&q, c + (base - r - q_lo) as f64, self.window);
        let mean = (m.mean + q_lo as f64).rem_euclid(n as f64);
        (m.counts, mean, m.var)
    }

    fn measure_full(&self, alpha: f64, beta: f64, depth: f64, detect: bool) -> (f64, f64, f64) {
        let n = self.bins;
        let mut flux = vec![beta / n as f64; n];
        self.wf.render_into(&mut flux, depth, alpha);
        if !detect {
            return measured_moments(&flux, &self.mf, self.window);
        }
        let mut q = vec![0.0; n];
        forward_q(&flux, self.dead_time, &mut q);
        measured_moments(&q, &self.mf, self.window)
    }

    /// Fixed-point refinement of the table estimate: the depth follows from the
    /// model's mean shift, the strength from a log-space step on the statistic
    /// the table inversion used.
    fn refine(
        &self,
        echo: &Echo,
        pulses: f64,
        beta: f64,
        luts: &PileupLuts,
        inv: Inversion,
        mean: f64,
    ) -> (f64, f64, f64) {
        let grid = &luts.alpha_grid;
        let (lo, hi) = (grid[0].max(f64::MIN_POSITIVE), grid[grid.len() - 1]);
        let col = luts.column(
            if inv.by_variance {
                &luts.lut_var
            } else {
                &luts.lut_gamma
            },
            beta,
        );
        let measured = if inv.by_variance {
            echo.var_tof
        } else {
            echo.counts / pulses
        };
        let (mut alpha, mut mean) = (inv.alpha, mean);
        let mut gamma = luts.gamma_at(alpha, beta);
        if !(measured > 0.0) {
            return (alpha, mean, gamma);
        }
        let table_slope = luts.log_slope(&col, alpha) * if inv.by_variance { -1.0 } else { 1.0 };
        let mut prev: Option<(f64, f64)> = None;
        for _ in 0..8 {
            let m = self.moments(alpha, beta, mean);
            let model = if inv.by_variance { m.var } else { m.gamma };
            mean = (echo.mean_tof + m.shift).rem_euclid(self.bins as f64);
            gamma = m.gamma;
            if !(model > 0.0) {
                break;
            }
            let (la, lm) = (alpha.ln(), model.ln());
            // Secant steps in log space once two evaluations are available.
            let slope = match prev {
                Some((pa, pm)) if (la - pa).abs() > 1e-12 && (lm - pm) * table_slope > 0.0 => {
                    (lm - pm) / (la - pa)
                }
                _ => table_slope,
            };
            if slope.abs() < 1e-3 {
                break;
            }
            prev = Some((la, lm));
            let next = (alpha * ((measured.ln() - lm) / slope).exp()).clamp(lo, hi);
            let done = (next - alpha).abs() <= 1e-7 * alpha;
            alpha = next;
            if done {
                break;
            }
        }
        (alpha, mean, gamma)
    }
}

/// `a - b` wrapped into `[-n/2, n/2)`.
fn circular_diff(a: f64, b: f64, n: f64) -> f64 {
    (a - b + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Parabolic refinement on a non-circular stretch.
fn refine_peak_local(f: &[f64], peak: usize) -> f64 {
    if peak == 0 || peak + 1 >= f.len() {
        return peak as f64;
    }
    refine_peak(&f[peak - 1..=peak + 1], 1) + peak as f64 - 1.0
}

/// Corrects every echo, estimating each pixel's background from its noise window.
pub fn correct_echoes(
    set: &EchoSet,
    luts: &PileupLuts,
    params: &CorrectionParams,
    model: Option<&ReturnModel>,
) -> CorrectedEchoSet {
    let echoes = set
        .echoes
        .par_iter()
        .map(|px| {
            let Some(first) = px.first() else {
                return Vec::new();
            };
            let beta = beta_from_background(
                first.background_raw,
                params.pulses,
                params.dead_time,
                params.bins,
            );
            px.iter()
                .map(|e| correct_echo_with(e, beta, luts, params, model))
                .collect()
        })
        .collect();
    CorrectedEchoSet {
        rows: set.rows,
        cols: set.cols,
        bins: set.bins,
        pulses: set.pulses,
        echoes,
    }
}

/// Expected glare detections over `pulses` pulses for a glare flux in photons per pulse.
pub fn glare_flux_to_expected_counts(
    flux: f64,
    beta_hat: f64,
    luts: &PileupLuts,
    pulses: u64,
    threshold: f64,
) -> f64 {
    let n = pulses as f64;
    if !(flux > 0.0) {
        return 0.0;
    }
    if flux <= threshold {
        return n * flux;
    }
    n * (luts.gamma_at(flux, beta_hat) - luts.gamma_background(beta_hat)).max(0.0)
}
