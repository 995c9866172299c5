//! Evaluation metrics for pointing, trajectory, depth and planning
//! predictions, plus seed-grouped success statistics.
//!
//! Means use exact (order-independent) summation, so shuffling samples or
//! merging partial sums from parallel workers never changes a result.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::geometry::{Mask, Pixel};
use crate::trajectory::Waypoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    EmptySet,
    #[error("seed group {0} has no episodes")]
    EmptyGroup(usize),
    #[error("length mismatch: predicted {predicted}, ground truth {truth}")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("ground-truth depth must be positive, got {0}")]
    NonPositiveGroundTruth(f64),
    #[error("invalid box: min must not exceed max")]
    InvalidBox,
    #[error("pixel threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("point-to-point pointing records need a pixel threshold")]
    MissingThreshold,
    #[error("step index must be at least 1, got {0}")]
    InvalidStep(i64),
    #[error("no text scorer named {0:?}")]
    NoScorer(String),
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
}

// ---------------------------------------------------------------------------
// Exact summation
// ---------------------------------------------------------------------------

/// Shewchuk's exactly rounded floating-point sum. Partials are kept
/// non-overlapping, so the result does not depend on insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
    count: usize,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        self.count += 1;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let count = self.count + other.count;
        for p in &other.partials {
            self.add(*p);
        }
        self.count = count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Correctly rounded total.
    pub fn sum(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // half-even correction when the remaining partials push past a tie
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum() / self.count as f64)
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

/// Exact sum of per-item values computed under the given schedule, merged
/// from fixed-size chunks.
pub fn exact_sum_with<T: Sync>(mode: ExecMode, items: &[T], f: impl Fn(&T) -> f64 + Sync + Send) -> ExactSum {
    let chunks: Vec<&[T]> = items.chunks(1024).collect();
    let partial = exec::map_slice(mode, &chunks, |c| c.iter().map(&f).collect::<ExactSum>());
    let mut total = ExactSum::new();
    for p in &partial {
        total.merge(p);
    }
    total
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> Result<f64, MetricsError> {
    values.into_iter().collect::<ExactSum>().mean().ok_or(MetricsError::EmptySet)
}

fn fraction(hits: usize, total: usize) -> Result<f64, MetricsError> {
    if total == 0 {
        Err(MetricsError::EmptySet)
    } else {
        Ok(hits as f64 / total as f64)
    }
}

// ---------------------------------------------------------------------------
// Pointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub min: Pixel,
    pub max: Pixel,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = MetricsError;
    fn try_from(b: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(Pixel::new(b[0], b[1]), Pixel::new(b[2], b[3]))
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.min.u, b.min.v, b.max.u, b.max.v]
    }
}

impl BoundingBox {
    pub fn new(min: Pixel, max: Pixel) -> Result<Self, MetricsError> {
        if !(min.u <= max.u && min.v <= max.v) {
            return Err(MetricsError::InvalidBox);
        }
        Ok(Self { min, max })
    }

    /// Inclusive on every edge.
    pub fn contains(&self, p: Pixel) -> bool {
        self.min.u <= p.u && p.u <= self.max.u && self.min.v <= p.v && p.v <= self.max.v
    }
}

pub fn hit_rate_box(preds: &[(Pixel, BoundingBox)]) -> Result<f64, MetricsError> {
    fraction(preds.iter().filter(|(p, b)| b.contains(*p)).count(), preds.len())
}

/// True when the point, rounded to the nearest pixel, lands on the mask.
pub fn mask_hit(p: Pixel, m: &Mask) -> bool {
    let (c, r) = (p.u.round(), p.v.round());
    c >= 0.0 && r >= 0.0 && c < m.width() as f64 && r < m.height() as f64 && m.get(c as u32, r as u32)
}

pub fn hit_rate_mask(preds: &[(Pixel, &Mask)]) -> Result<f64, MetricsError> {
    fraction(preds.iter().filter(|(p, m)| mask_hit(*p, m)).count(), preds.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointingStats {
    /// Mean Euclidean distance.
    pub med: f64,
    /// Fraction of pairs strictly closer than the threshold.
    pub sr: f64,
}

pub fn pointing_stats(preds: &[Pixel], gts: &[Pixel], threshold: f64) -> Result<PointingStats, MetricsError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: preds.len(),
            truth: gts.len(),
        });
    }
    let dists: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p.distance(g)).collect();
    Ok(PointingStats {
        med: mean_of(dists.iter().copied())?,
        sr: fraction(dists.iter().filter(|d| **d < threshold).count(), dists.len())?,
    })
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajErrors {
    pub rmse: f64,
    pub mae: f64,
}

/// Index-aligned point errors between two equal-length trajectories.
pub fn traj_errors<P: Waypoint>(pred: &[P], gt: &[P]) -> Result<TrajErrors, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: pred.len(),
            truth: gt.len(),
        });
    }
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.distance(g)).collect();
    Ok(TrajErrors {
        rmse: mean_of(errs.iter().map(|e| e * e))?.sqrt(),
        mae: mean_of(errs.iter().copied())?,
    })
}

/// Per-sample errors averaged over a set of trajectory pairs.
pub fn traj_errors_mean<P: Waypoint>(pairs: &[(Vec<P>, Vec<P>)]) -> Result<TrajErrors, MetricsError> {
    let per: Vec<TrajErrors> = pairs
        .iter()
        .map(|(p, g)| traj_errors(p, g))
        .collect::<Result<_, _>>()?;
    Ok(TrajErrors {
        rmse: mean_of(per.iter().map(|e| e.rmse))?,
        mae: mean_of(per.iter().map(|e| e.mae))?,
    })
}

// ---------------------------------------------------------------------------
// Depth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPair {
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    /// Fraction with `|pred − gt| ≤ 0.2·gt`.
    pub ratio_accuracy: f64,
    /// Mean absolute deviation in centimeters.
    pub mad_cm: f64,
}

pub const DEPTH_RATIO_TOLERANCE: f64 = 0.20;

pub fn depth_metrics(preds: &[DepthPair]) -> Result<DepthStats, MetricsError> {
    if let Some(p) = preds.iter().find(|p| !(p.gt > 0.0)) {
        return Err(MetricsError::NonPositiveGroundTruth(p.gt));
    }
    let hits = preds
        .iter()
        .filter(|p| (p.pred - p.gt).abs() <= DEPTH_RATIO_TOLERANCE * p.gt)
        .count();
    Ok(DepthStats {
        ratio_accuracy: fraction(hits, preds.len())?,
        mad_cm: mean_of(preds.iter().map(|p| (p.pred - p.gt).abs()))? * 100.0,
    })
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningPrediction {
    pub pred_step: i64,
    pub gt_step: i64,
    pub pred_finished: bool,
    pub gt_finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_traj: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_traj: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningStats {
    pub step_acc: f64,
    pub step_mae: f64,
    pub status_acc: f64,
    /// Errors of the next-step trajectories, when any pair was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajErrors>,
}

pub fn planning_metrics(preds: &[PlanningPrediction]) -> Result<PlanningStats, MetricsError> {
    if let Some(p) = preds.iter().find(|p| p.pred_step < 1 || p.gt_step < 1) {
        return Err(MetricsError::InvalidStep(p.pred_step.min(p.gt_step)));
    }
    let n = preds.len();
    let pairs: Vec<(Vec<Pixel>, Vec<Pixel>)> = preds
        .iter()
        .filter_map(|p| match (&p.pred_traj, &p.gt_traj) {
            (Some(a), Some(b)) => Some((
                a.iter().map(|q| Pixel::new(q[0], q[1])).collect(),
                b.iter().map(|q| Pixel::new(q[0], q[1])).collect(),
            )),
            _ => None,
        })
        .collect();
    Ok(PlanningStats {
        step_acc: fraction(preds.iter().filter(|p| p.pred_step == p.gt_step).count(), n)?,
        step_mae: mean_of(preds.iter().map(|p| (p.pred_step - p.gt_step).abs() as f64))?,
        status_acc: fraction(preds.iter().filter(|p| p.pred_finished == p.gt_finished).count(), n)?,
        trajectory: if pairs.is_empty() { None } else { Some(traj_errors_mean(&pairs)?) },
    })
}

// ---------------------------------------------------------------------------
// Success statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    /// Mean of per-seed success percentages.
    pub mean: f64,
    /// Sample standard deviation (ddof = 1) across seeds; 0 for one seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

pub fn success_rates(rates_percent: &[f64]) -> Result<SuccessStats, MetricsError> {
    let n = rates_percent.len();
    let mean = mean_of(rates_percent.iter().copied())?;
    let std = if n < 2 {
        0.0
    } else {
        let ss: ExactSum = rates_percent.iter().map(|r| (r - mean) * (r - mean)).collect();
        (ss.sum() / (n - 1) as f64).sqrt()
    };
    Ok(SuccessStats {
        mean,
        std,
        per_seed: rates_percent.to_vec(),
    })
}

/// Episode outcomes grouped by seed → mean ± sample std of success %.
pub fn success_stats(groups: &[Vec<bool>]) -> Result<SuccessStats, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let rates = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.is_empty() {
                Err(MetricsError::EmptyGroup(i))
            } else {
                Ok(100.0 * g.iter().filter(|s| **s).count() as f64 / g.len() as f64)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    success_rates(&rates)
}

// ---------------------------------------------------------------------------
// Text similarity
// ---------------------------------------------------------------------------

pub trait TextScorer: Send + Sync {
    fn score(&self, pred: &str, gt: &str) -> f64;
}

/// Token-level F1 over lowercased alphanumeric tokens (multiset overlap).
/// A lexical stand-in, not an embedding-based score.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl TextScorer for TokenF1 {
    fn score(&self, pred: &str, gt: &str) -> f64 {
        let (p, g) = (tokens(pred), tokens(gt));
        if p.is_empty() || g.is_empty() {
            return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &g {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0usize;
        for t in &p {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let precision = overlap as f64 / p.len() as f64;
        let recall = overlap as f64 / g.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

pub const DEFAULT_SCORER: &str = "token_f1";

/// Named text scorers; starts with [`TokenF1`] under `"token_f1"`.
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Box<dyn TextScorer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(DEFAULT_SCORER, Box::new(TokenF1));
        r
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            scorers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, scorer: Box<dyn TextScorer>) {
        self.scorers.insert(name.to_string(), scorer);
    }

    pub fn names(&self) -> Vec<&str> {
        self.scorers.keys().map(String::as_str).collect()
    }
}

pub fn text_similarity(pred: &str, gt: &str, registry: &ScorerRegistry, scorer: &str) -> Result<f64, MetricsError> {
    registry
        .scorers
        .get(scorer)
        .map(|s| s.score(pred, gt))
        .ok_or_else(|| MetricsError::NoScorer(scorer.to_string()))
}

// ---------------------------------------------------------------------------
// Records and reports
// ---------------------------------------------------------------------------

/// One evaluation sample, as a JSON-lines record with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalRecord {
    PointingBox {
        pred: [f64; 2],
        gt_box: BoundingBox,
    },
    PointingMask {
        pred: [f64; 2],
        /// Mask image path, relative to the records file.
        gt_mask: String,
    },
    Pointing {
        pred: [f64; 2],
        gt: [f64; 2],
    },
    Trajectory {
        pred: Vec<[f64; 2]>,
        gt: Vec<[f64; 2]>,
    },
    Depth {
        pred: f64,
        gt: f64,
    },
    Planning {
        #[serde(flatten)]
        prediction: PlanningPrediction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pred_text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gt_text: Option<String>,
    },
    Episode {
        seed: u64,
        success: bool,
    },
}

/// Metric name → value, grouped into sections, with sample counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub sections: BTreeMap<String, BTreeMap<String, f64>>,
    pub counts: BTreeMap<String, usize>,
}

impl MetricReport {
    fn put(&mut self, section: &str, name: &str, v: f64) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(name.to_string(), v);
    }

    /// Aligned plain-text table, one row per metric.
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String, String)> = self
            .sections
            .iter()
            .flat_map(|(s, m)| {
                m.iter()
                    .map(move |(k, v)| (s.clone(), k.clone(), format!("{v:.4}")))
            })
            .collect();
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("section".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("metric".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w0$}  {:<w1$}  value", "section", "metric");
        for (s, k, v) in rows {
            let _ = writeln!(out, "{s:<w0$}  {k:<w1$}  {v:>}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Pixel threshold for point-to-point success rate; required when such
    /// records are present.
    pub threshold: Option<f64>,
    pub scorer: Option<String>,
}

/// Aggregates a record set into a report. `load_mask` resolves the mask
/// paths of mask-pointing records.
pub fn evaluate(
    records: &[EvalRecord],
    options: &EvalOptions,
    registry: &ScorerRegistry,
    mut load_mask: impl FnMut(&str) -> Result<Mask, String>,
) -> Result<MetricReport, MetricsError> {
    let mut boxes = Vec::new();
    let mut masks: Vec<(Pixel, Mask)> = Vec::new();
    let (mut pts_pred, mut pts_gt) = (Vec::new(), Vec::new());
    let mut trajs = Vec::new();
    let mut depths = Vec::new();
    let mut plans = Vec::new();
    let mut texts = Vec::new();
    let mut episodes: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let px = |a: &[f64; 2]| Pixel::new(a[0], a[1]);
    for (index, r) in records.iter().enumerate() {
        match r {
            EvalRecord::PointingBox { pred, gt_box } => boxes.push((px(pred), *gt_box)),
            EvalRecord::PointingMask { pred, gt_mask } => {
                let m = load_mask(gt_mask).map_err(|message| MetricsError::Record { index, message })?;
                masks.push((px(pred), m));
            }
            EvalRecord::Pointing { pred, gt } => {
                pts_pred.push(px(pred));
                pts_gt.push(px(gt));
            }
            EvalRecord::Trajectory { pred, gt } => {
                trajs.push((pred.iter().map(px).collect::<Vec<_>>(), gt.iter().map(px).collect::<Vec<_>>()))
            }
            EvalRecord::Depth { pred, gt } => depths.push(DepthPair { pred: *pred, gt: *gt }),
            EvalRecord::Planning {
                prediction,
                pred_text,
                gt_text,
            } => {
                plans.push(prediction.clone());
                if let (Some(p), Some(g)) = (pred_text, gt_text) {
                    texts.push((p.clone(), g.clone()));
                }
            }
            EvalRecord::Episode { seed, success } => episodes.entry(*seed).or_default().push(*success),
        }
    }

    let mut rep = MetricReport::default();
    if !boxes.is_empty() {
        rep.put("pointing", "box_hit_rate", hit_rate_box(&boxes)?);
        rep.counts.insert("pointing_box".into(), boxes.len());
    }
    if !masks.is_empty() {
        let refs: Vec<(Pixel, &Mask)> = masks.iter().map(|(p, m)| (*p, m)).collect();
        rep.put("pointing", "mask_hit_rate", hit_rate_mask(&refs)?);
        rep.counts.insert("pointing_mask".into(), masks.len());
    }
    if !pts_pred.is_empty() {
        let threshold = options.threshold.ok_or(MetricsError::MissingThreshold)?;
        let s = pointing_stats(&pts_pred, &pts_gt, threshold)?;
        rep.put("pointing", "med", s.med);
        rep.put("pointing", "sr", s.sr);
        rep.counts.insert("pointing".into(), pts_pred.len());
    }
    if !trajs.is_empty() {
        let e = traj_errors_mean(&trajs)?;
        rep.put("trajectory", "rmse", e.rmse);
        rep.put("trajectory", "mae", e.mae);
        rep.counts.insert("trajectory".into(), trajs.len());
    }
    if !depths.is_empty() {
        let d = depth_metrics(&depths)?;
        rep.put("depth", "ratio_accuracy", d.ratio_accuracy);
        rep.put("depth", "mad_cm", d.mad_cm);
        rep.counts.insert("depth".into(), depths.len());
    }
    if !plans.is_empty() {
        let p = planning_metrics(&plans)?;
        rep.put("planning", "step_acc", p.step_acc);
        rep.put("planning", "step_mae", p.step_mae);
        rep.put("planning", "status_acc", p.status_acc);
        if let Some(t) = p.trajectory {
            rep.put("planning", "traj_rmse", t.rmse);
            rep.put("planning", "traj_mae", t.mae);
        }
        rep.counts.insert("planning".into(), plans.len());
    }
    if !texts.is_empty() {
        let name = options.scorer.as_deref().unwrap_or(DEFAULT_SCORER);
        let scores = texts
            .iter()
            .map(|(p, g)| text_similarity(p, g, registry, name))
            .collect::<Result<Vec<_>, _>>()?;
        rep.put("planning", &format!("text_{name}"), mean_of(scores)?);
    }
    if !episodes.is_empty() {
        let groups: Vec<Vec<bool>> = episodes.into_values().collect();
        let s = success_stats(&groups)?;
        rep.put("success", "mean", s.mean);
        rep.put("success", "std", s.std);
        rep.counts.insert("seeds".into(), groups.len());
    }
    if rep.sections.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(rep)
}

/// Parses JSON-lines records, skipping blank lines.
pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Record {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [1e16, 1.0, -1e16, 1e-3, 3.0, -2.5e15, 2.5e15];
        let a: ExactSum = xs.iter().copied().collect();
        let b: ExactSum = xs.iter().rev().copied().collect();
        assert_eq!(a.sum(), b.sum());
        assert_eq!(a.sum(), 4.001);
        let mut m: ExactSum = xs[..3].iter().copied().collect();
        m.merge(&xs[3..].iter().copied().collect());
        assert_eq!(m.sum(), a.sum());
        assert_eq!(m.count(), 7);
        assert_eq!([0.1; 10].iter().copied().collect::<ExactSum>().sum(), 1.0);
    }

    #[test]
    fn box_boundaries() {
        let b = BoundingBox::new(Pixel::new(0.0, 0.0), Pixel::new(10.0, 5.0)).unwrap();
        assert_eq!(hit_rate_box(&[(Pixel::new(10.0, 5.0), b)]).unwrap(), 1.0);
        assert_eq!(hit_rate_box(&[(Pixel::new(10.1, 5.0), b)]).unwrap(), 0.0);
        assert_eq!(hit_rate_box(&[]), Err(MetricsError::EmptySet));
        assert!(BoundingBox::new(Pixel::new(1.0, 0.0), Pixel::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn mask_rounding() {
        let m = Mask::from_fn(4, 4, |c, r| c == 2 && r == 1);
        assert!(mask_hit(Pixel::new(2.4, 0.6), &m));
        assert!(!mask_hit(Pixel::new(2.6, 1.0), &m));
        assert!(!mask_hit(Pixel::new(-3.0, 1.0), &m));
    }

    #[test]
    fn pointing_threshold_is_strict() {
        let s = pointing_stats(&[Pixel::new(0.0, 0.0)], &[Pixel::new(3.0, 4.0)], 5.0).unwrap();
        assert_eq!(s, PointingStats { med: 5.0, sr: 0.0 });
        let same = [Pixel::new(1.0, 2.0)];
        assert_eq!(pointing_stats(&same, &same, 5.0).unwrap(), PointingStats { med: 0.0, sr: 1.0 });
    }

    #[test]
    fn trajectory_constant_offset() {
        let a: Vec<Pixel> = (0..8).map(|i| Pixel::new(i as f64, 2.0 * i as f64)).collect();
        let b: Vec<Pixel> = a.iter().map(|p| Pixel::new(p.u + 3.0, p.v - 4.0)).collect();
        let e = traj_errors(&a, &b).unwrap();
        assert_eq!(e, TrajErrors { rmse: 5.0, mae: 5.0 });
        assert!(matches!(traj_errors(&a, &b[..7]), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn depth_boundary_cases() {
        let d = depth_metrics(&[DepthPair { pred: 0.119, gt: 0.10 }]).unwrap();
        assert_eq!(d.ratio_accuracy, 1.0);
        let d = depth_metrics(&[DepthPair { pred: 0.121, gt: 0.10 }]).unwrap();
        assert_eq!(d.ratio_accuracy, 0.0);
        assert!((d.mad_cm - 2.1).abs() < 1e-12);
        assert!(matches!(
            depth_metrics(&[DepthPair { pred: 0.1, gt: 0.0 }]),
            Err(MetricsError::NonPositiveGroundTruth(_))
        ));
    }

    #[test]
    fn planning_examples() {
        let p = |ps, gs, pf, gf| PlanningPrediction {
            pred_step: ps,
            gt_step: gs,
            pred_finished: pf,
            gt_finished: gf,
            pred_traj: None,
            gt_traj: None,
        };
        let perfect = planning_metrics(&[p(1, 1, false, false), p(3, 3, true, true)]).unwrap();
        assert_eq!((perfect.step_acc, perfect.step_mae, perfect.status_acc), (1.0, 0.0, 1.0));
        let off = planning_metrics(&[p(3, 1, false, false), p(2, 4, false, true)]).unwrap();
        assert_eq!((off.step_acc, off.step_mae, off.status_acc), (0.0, 2.0, 0.5));
        assert_eq!(planning_metrics(&[p(0, 1, false, false)]), Err(MetricsError::InvalidStep(0)));
    }

    #[test]
    fn success_examples() {
        let s = success_stats(&[vec![true; 10], vec![true; 10], vec![true; 10]]).unwrap();
        assert_eq!((s.mean, s.std), (100.0, 0.0));
        let mut ninety = vec![true; 9];
        ninety.push(false);
        let s = success_stats(&[ninety, vec![true; 10]]).unwrap();
        assert_eq!(s.mean, 95.0);
        assert!((s.std - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(success_stats(&[vec![false, true]]).unwrap().std, 0.0);
        assert_eq!(success_stats(&[vec![true], vec![]]), Err(MetricsError::EmptyGroup(1)));
    }

    #[test]
    fn token_f1() {
        let r = ScorerRegistry::default();
        assert_eq!(text_similarity("Pick the cup", "pick the cup", &r, "token_f1").unwrap(), 1.0);
        assert_eq!(text_similarity("a b", "c d", &r, "token_f1").unwrap(), 0.0);
        // 4 shared tokens, precision 4/5, recall 4/4
        let f = text_similarity("pick up the coffee goblet", "pick the coffee goblet", &r, "token_f1").unwrap();
        assert!((f - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(
            text_similarity("a", "a", &r, "bertscore"),
            Err(MetricsError::NoScorer("bertscore".into()))
        );
    }

    #[test]
    fn records_roundtrip_and_report() {
        let text = r#"
{"kind":"pointing_box","pred":[1,1],"gt_box":[0,0,2,2]}
{"kind":"depth","pred":0.119,"gt":0.1}
{"kind":"planning","pred_step":2,"gt_step":2,"pred_finished":false,"gt_finished":true,"pred_text":"open the jar","gt_text":"open jar"}
{"kind":"episode","seed":0,"success":true}
{"kind":"episode","seed":1,"success":false}
"#;
        let recs = parse_records(text).unwrap();
        assert_eq!(recs.len(), 5);
        for r in &recs {
            let s = serde_json::to_string(r).unwrap();
            assert_eq!(&serde_json::from_str::<EvalRecord>(&s).unwrap(), r);
        }
        let rep = evaluate(&recs, &EvalOptions::default(), &ScorerRegistry::default(), |_| {
            Err("unused".into())
        })
        .unwrap();
        assert_eq!(rep.sections["pointing"]["box_hit_rate"], 1.0);
        assert_eq!(rep.sections["planning"]["status_acc"], 0.0);
        assert_eq!(rep.sections["success"]["mean"], 50.0);
        assert!(rep.to_table().contains("ratio_accuracy"));

        let need = parse_records(r#"{"kind":"pointing","pred":[0,0],"gt":[1,1]}"#).unwrap();
        assert_eq!(
            evaluate(&need, &EvalOptions::default(), &ScorerRegistry::default(), |_| Err(String::new())),
            Err(MetricsError::MissingThreshold)
        );
    }
}
