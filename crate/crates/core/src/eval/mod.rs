//! Boundary benchmark: thinning, tolerance matching, ODS/OIS/AP.
//!
//! Counting convention for several annotators per image:
//!
//! - a predicted pixel is a true positive when it is matched in a maximum
//!   matching against the union of all annotations; the other predicted
//!   pixels are false positives;
//! - recall is accumulated per annotator: each annotation is matched
//!   against the prediction separately, matched pixels add to the recalled
//!   count and unmatched ones are false negatives.

mod matching;
pub mod nms;

pub use matching::max_matching;
pub use nms::{nms_thin, normal_angles, smooth};

use alloc::vec::Vec;

use crate::error::{cfg_err, dim_err, input_err};
use crate::granularity::AnnotationSet;
use crate::math;
use crate::{Map, Mask, Result};

pub const DEFAULT_TOLERANCE: f64 = 0.0075;
/// Tolerance used for NYUDv2-style data.
pub const WIDE_TOLERANCE: f64 = 0.011;
pub const DEFAULT_THRESHOLDS: usize = 99;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    /// Matching distance as a fraction of the image diagonal.
    pub tolerance: f64,
    pub thresholds: usize,
    pub apply_nms: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tolerance: DEFAULT_TOLERANCE, thresholds: DEFAULT_THRESHOLDS, apply_nms: true }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 0.1) {
            return Err(cfg_err!("tolerance {} must lie in (0, 0.1)", self.tolerance));
        }
        if self.thresholds == 0 {
            return Err(cfg_err!("at least one threshold is required"));
        }
        Ok(())
    }

    /// `t_i = i / (T + 1)`, `i = 1..=T`.
    pub fn threshold_values(&self) -> Vec<f64> {
        let t = self.thresholds;
        (1..=t).map(|i| i as f64 / (t + 1) as f64).collect()
    }

    /// Matching radius in pixels for an `h × w` image.
    pub fn max_distance(&self, h: usize, w: usize) -> f64 {
        self.tolerance * math::sqrt((h * h + w * w) as f64)
    }
}

/// Match counts of one binarised prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counts {
    /// Matched predicted pixels.
    pub tp: u64,
    /// Unmatched predicted pixels.
    pub fp: u64,
    /// Ground-truth pixels matched, summed over annotators.
    pub recalled: u64,
    /// Ground-truth pixels left unmatched, summed over annotators.
    pub fn_: u64,
}

impl core::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, recalled: self.recalled + o.recalled, fn_: self.fn_ + o.fn_ }
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        let n = self.tp + self.fp;
        if n == 0 {
            0.0
        } else {
            self.tp as f64 / n as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let n = self.recalled + self.fn_;
        if n == 0 {
            0.0
        } else {
            self.recalled as f64 / n as f64
        }
    }

    pub fn f(&self) -> f64 {
        f_score(self.precision(), self.recall())
    }
}

pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Counts of a binary prediction against a set of annotations.
pub fn correspond(pred: &Mask, gts: &[Mask], d_max: f64) -> Result<Counts> {
    if d_max < 0.0 || d_max.is_nan() {
        return Err(input_err!("matching distance must be non-negative"));
    }
    let Some(first) = gts.first() else {
        return Err(input_err!("no ground truth"));
    };
    for g in gts {
        pred.ensure_same_size(g)?;
    }
    let union = Mask::from_fn(first.height(), first.width(), |y, x| gts.iter().any(|g| g.at(y, x)));
    let n_pred = pred.count() as u64;
    let tp = max_matching(pred, &union, d_max) as u64;
    let mut recalled = 0;
    let mut total = 0;
    for g in gts {
        recalled += max_matching(pred, g, d_max) as u64;
        total += g.count() as u64;
    }
    Ok(Counts { tp, fp: n_pred - tp, recalled, fn_: total - recalled })
}

/// Per-threshold counts of one probability map.
pub fn image_counts(prob: &Map, gt: &AnnotationSet, cfg: &EvalConfig) -> Result<Vec<Counts>> {
    cfg.validate()?;
    prob.ensure_same_size(&gt.labels()[0])?;
    let thin = if cfg.apply_nms { nms_thin(prob) } else { prob.clone() };
    let (h, w) = prob.size();
    let d = cfg.max_distance(h, w);
    cfg.threshold_values().into_iter().map(|t| correspond(&thin.threshold(t), gt.labels(), d)).collect()
}

/// Aggregated benchmark results.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub ods_f: f64,
    pub ods_threshold: f64,
    pub ois_f: f64,
    pub ap: f64,
    /// Per image, the index of its best threshold.
    pub image_best_threshold: Vec<usize>,
    /// Per image, its F score at that threshold.
    pub image_best_f: Vec<f64>,
    /// Best-match evaluation only: the chosen candidate per image and
    /// threshold.
    pub selected: Option<Vec<Vec<usize>>>,
}

/// Area under the precision envelope of a PR curve.
pub fn average_precision(precision: &[f64], recall: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = recall.iter().copied().zip(precision.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut env = 0.0f64;
    let mut area = 0.0;
    for i in (0..pts.len()).rev() {
        env = env.max(pts[i].1);
        let prev = if i == 0 { 0.0 } else { pts[i - 1].0 };
        area += (pts[i].0 - prev) * env;
    }
    area
}

/// Build the report from per-image per-threshold counts.
pub fn report_from_counts(per_image: &[Vec<Counts>], thresholds: &[f64]) -> Result<EvalReport> {
    if per_image.is_empty() {
        return Err(input_err!("empty dataset"));
    }
    let t = thresholds.len();
    if per_image.iter().any(|c| c.len() != t) {
        return Err(dim_err!("every image needs {t} threshold counts"));
    }
    let totals: Vec<Counts> = (0..t).map(|i| per_image.iter().fold(Counts::default(), |a, c| a + c[i])).collect();
    let precision: Vec<f64> = totals.iter().map(Counts::precision).collect();
    let recall: Vec<f64> = totals.iter().map(Counts::recall).collect();
    let f: Vec<f64> = totals.iter().map(Counts::f).collect();
    let best = argmax(&f);
    let mut ois = Counts::default();
    let mut image_best_threshold = Vec::with_capacity(per_image.len());
    let mut image_best_f = Vec::with_capacity(per_image.len());
    for counts in per_image {
        let fs: Vec<f64> = counts.iter().map(Counts::f).collect();
        let b = argmax(&fs);
        ois = ois + counts[b];
        image_best_threshold.push(b);
        image_best_f.push(fs[b]);
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        ap: average_precision(&precision, &recall),
        ods_f: f[best],
        ods_threshold: thresholds[best],
        ois_f: ois.f(),
        precision,
        recall,
        f,
        image_best_threshold,
        image_best_f,
        selected: None,
    })
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_dataset(n_preds: usize, gts: &[AnnotationSet]) -> Result<()> {
    if n_preds == 0 {
        return Err(input_err!("empty dataset"));
    }
    if n_preds != gts.len() {
        return Err(input_err!("{n_preds} predictions for {} ground-truth sets", gts.len()));
    }
    Ok(())
}

/// Evaluate one probability map per image.
pub fn evaluate(preds: &[Map], gts: &[AnnotationSet], cfg: &EvalConfig) -> Result<EvalReport> {
    check_dataset(preds.len(), gts)?;
    let counts = preds.iter().zip(gts).map(|(p, g)| image_counts(p, g, cfg)).collect::<Result<Vec<_>>>()?;
    report_from_counts(&counts, &cfg.threshold_values())
}

/// For every threshold keep the candidate with the highest image F
/// (lowest index on ties). Returns the chosen counts and indices.
pub fn select_best(candidates: &[Vec<Counts>]) -> Result<(Vec<Counts>, Vec<usize>)> {
    let Some(first) = candidates.first() else {
        return Err(input_err!("no candidates"));
    };
    let t = first.len();
    if candidates.iter().any(|c| c.len() != t) {
        return Err(dim_err!("candidates disagree on the threshold count"));
    }
    let mut chosen = Vec::with_capacity(t);
    let mut index = Vec::with_capacity(t);
    for i in 0..t {
        let fs: Vec<f64> = candidates.iter().map(|c| c[i].f()).collect();
        let b = argmax(&fs);
        chosen.push(candidates[b][i]);
        index.push(b);
    }
    Ok((chosen, index))
}

/// Best-match evaluation over `M` candidate maps per image.
pub fn best_match_evaluate(candidates: &[Vec<Map>], gts: &[AnnotationSet], cfg: &EvalConfig) -> Result<EvalReport> {
    check_dataset(candidates.len(), gts)?;
    let mut per_image = Vec::with_capacity(candidates.len());
    for (maps, g) in candidates.iter().zip(gts) {
        let counts = maps.iter().map(|m| image_counts(m, g, cfg)).collect::<Result<Vec<_>>>()?;
        per_image.push(counts);
    }
    best_match_from_counts(&per_image, &cfg.threshold_values())
}

/// `per_image[i][k]` holds the threshold counts of candidate `k` of image `i`.
pub fn best_match_from_counts(per_image: &[Vec<Vec<Counts>>], thresholds: &[f64]) -> Result<EvalReport> {
    let mut chosen = Vec::with_capacity(per_image.len());
    let mut selected = Vec::with_capacity(per_image.len());
    for c in per_image {
        let (counts, idx) = select_best(c)?;
        chosen.push(counts);
        selected.push(idx);
    }
    let mut report = report_from_counts(&chosen, thresholds)?;
    report.selected = Some(selected);
    Ok(report)
}
