//! Depth-map accuracy against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::deglare::DepthMap;
use crate::error::{Error, Result};

/// How pixels without a return are scored.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MissingPolicy {
    /// Only pixels valid in both maps are evaluated.
    #[default]
    Exclude,
    /// A missing prediction counts as this depth in meters.
    Penalize(f64),
}

fn check_aligned(truth: &DepthMap, pred: &DepthMap, mask: Option<&[bool]>) -> Result<()> {
    if (truth.rows, truth.cols) != (pred.rows, pred.cols) {
        return Err(Error::Dimension(format!(
            "truth is {}x{} but prediction is {}x{}",
            truth.rows, truth.cols, pred.rows, pred.cols
        )));
    }
    if let Some(m) = mask {
        if m.len() != truth.depth.len() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, expected {}",
                m.len(),
                truth.depth.len()
            )));
        }
    }
    Ok(())
}

/// Pairs of (truth, prediction) in meters selected by the mask and policy.
pub fn paired_depths(
    truth: &DepthMap,
    pred: &DepthMap,
    mask: Option<&[bool]>,
    policy: MissingPolicy,
) -> Result<Vec<(f64, f64)>> {
    check_aligned(truth, pred, mask)?;
    let pairs: Vec<(f64, f64)> = truth
        .depth
        .iter()
        .zip(&pred.depth)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .filter_map(|(_, (t, p))| {
            if t.is_nan() {
                return None;
            }
            match (p.is_nan(), policy) {
                (false, _) => Some((*t as f64, *p as f64)),
                (true, MissingPolicy::Exclude) => None,
                (true, MissingPolicy::Penalize(d)) => Some((*t as f64, d)),
            }
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "no pixels are valid in both maps".into(),
        ));
    }
    Ok(pairs)
}

pub fn rmse(
    truth: &DepthMap,
    pred: &DepthMap,
    mask: Option<&[bool]>,
    policy: MissingPolicy,
) -> Result<f64> {
    let pairs = paired_depths(truth, pred, mask, policy)?;
    let s: f64 = pairs.iter().map(|(t, p)| (t - p).powi(2)).sum();
    Ok((s / pairs.len() as f64).sqrt())
}

/// Fraction of pixels whose depth ratio in either direction is below `1 + i / 100`.
pub fn delta_i(
    truth: &DepthMap,
    pred: &DepthMap,
    i: f64,
    mask: Option<&[bool]>,
    policy: MissingPolicy,
) -> Result<f64> {
    let pairs = paired_depths(truth, pred, mask, policy)?;
    let limit = 1.0 + i / 100.0;
    let mut hits = 0usize;
    for (t, p) in &pairs {
        if !(*t > 0.0) || !(*p > 0.0) {
            return Err(Error::Input(format!(
                "nonpositive depth in evaluated pixels ({t}, {p})"
            )));
        }
        if (t / p).max(p / t) < limit {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Pixels whose depth lies within `tolerance` meters of `depth`.
pub fn ghost_mask(map: &DepthMap, depth: f64, tolerance: f64) -> Vec<bool> {
    map.depth
        .iter()
        .map(|d| !d.is_nan() && (*d as f64 - depth).abs() <= tolerance)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    /// Keyed by the threshold percentage.
    pub delta: BTreeMap<u32, f64>,
    pub n_valid: usize,
    pub n_ghost_before: Option<usize>,
    pub n_ghost_after: Option<usize>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rmse = {}", self.rmse);
        for (i, d) in &self.delta {
            let _ = writeln!(s, "delta_{i} = {d}");
        }
        let _ = writeln!(s, "n_valid = {}", self.n_valid);
        if let Some(n) = self.n_ghost_before {
            let _ = writeln!(s, "n_ghost_before = {n}");
        }
        if let Some(n) = self.n_ghost_after {
            let _ = writeln!(s, "n_ghost_after = {n}");
        }
        s
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["rmse".to_string()];
        cols.extend(self.delta.keys().map(|i| format!("delta_{i}")));
        cols.extend(["n_valid", "n_ghost_before", "n_ghost_after"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.rmse.to_string()];
        cols.extend(self.delta.values().map(|d| d.to_string()));
        cols.push(self.n_valid.to_string());
        for n in [self.n_ghost_before, self.n_ghost_after] {
            cols.push(n.map_or(String::new(), |n| n.to_string()));
        }
        cols.join(",")
    }
}

pub fn evaluate(
    truth: &DepthMap,
    pred: &DepthMap,
    thresholds: &[u32],
    mask: Option<&[bool]>,
    policy: MissingPolicy,
) -> Result<EvalReport> {
    let n_valid = paired_depths(truth, pred, mask, policy)?.len();
    let mut delta = BTreeMap::new();
    for &i in thresholds {
        delta.insert(i, delta_i(truth, pred, i as f64, mask, policy)?);
    }
    Ok(EvalReport {
        rmse: rmse(truth, pred, mask, policy)?,
        delta,
        n_valid,
        n_ghost_before: None,
        n_ghost_after: None,
    })
}
