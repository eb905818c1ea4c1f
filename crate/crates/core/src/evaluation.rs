//! COCO-style detection metrics.
//!
//! Detections are matched to ground truths per (image, class) in descending
//! score order; a detection is a true positive when an unmatched ground truth
//! of the same class has IoU >= the threshold (the highest-IoU candidate wins).
//! AP is the mean of the interpolated precision at evenly spaced recall
//! points, mAP the unweighted mean over classes, and AR the mean best recall
//! over thresholds and classes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::proposals::score_order;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub image_id: u64,
    pub class_id: u64,
    pub bbox: BBox,
}

/// What to do with a class that has detections but no ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentClassPolicy {
    /// Leave the class out of every aggregate.
    #[default]
    Skip,
    /// Count the class with AP 0 (it has no recall, so AR ignores it).
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections_per_image: usize,
    pub recall_samples: usize,
    pub absent_classes: AbsentClassPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_iou_thresholds(),
            max_detections_per_image: 100,
            recall_samples: 101,
            absent_classes: AbsentClassPolicy::Skip,
        }
    }
}

/// 0.50, 0.55, ..., 0.95. Built from integer hundredths so that 0.6 etc.
/// are the nearest doubles.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || !t.iter().all(|v| *v > 0.0 && *v < 1.0) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "IoU thresholds must be strictly increasing values in (0, 1), got {t:?}"
            )));
        }
        if self.max_detections_per_image == 0 {
            return Err(Error::InvalidArgument("max detections per image must be positive".into()));
        }
        if self.recall_samples < 2 {
            return Err(Error::InvalidArgument("need at least two recall samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub det_tp: Vec<bool>,
    /// Ground-truth index each true positive matched.
    pub det_matched_gt: Vec<Option<usize>>,
    /// Per ground truth, in input order. Unmatched ground truths are false negatives.
    pub gt_matched: Vec<bool>,
}

/// Greedy matching at IoU threshold `t`.
///
/// Intended for one (image, class) slice, but pairs with a different image or
/// class never match, so a detection with the wrong label is a false positive.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthAnnotation], t: f64) -> MatchResult {
    let order = score_order(dets, |d| d.score);
    match_in_order(dets, &order, gts, t)
}

fn match_in_order(dets: &[Detection], order: &[usize], gts: &[GroundTruthAnnotation], t: f64) -> MatchResult {
    let mut det_tp = vec![false; dets.len()];
    let mut det_matched_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for &d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.image_id != det.image_id || gt.class_id != det.class_id {
                continue;
            }
            let v = geometry::iou_or_zero(&det.bbox, &gt.bbox);
            if v >= t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            det_tp[d] = true;
            det_matched_gt[d] = Some(g);
        }
    }
    MatchResult {
        det_tp,
        det_matched_gt,
        gt_matched,
    }
}

/// AP and best recall of one class at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdEval {
    /// `None` when the class has neither detections nor ground truths.
    pub ap: Option<f64>,
    /// `None` when the class has no ground truths.
    pub recall: Option<f64>,
}

/// AP of a single class across all images.
///
/// Returns `None` when the class has neither detections nor ground truths,
/// and `Some(0.0)` when it has detections but no ground truths.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruthAnnotation],
    t: f64,
    cfg: &EvalConfig,
) -> Option<f64> {
    evaluate_threshold(dets, gts, t, cfg).ap
}

/// Per-image capped matching, then a PR curve over all kept detections.
pub fn evaluate_threshold(
    dets: &[Detection],
    gts: &[GroundTruthAnnotation],
    t: f64,
    cfg: &EvalConfig,
) -> ThresholdEval {
    let npos = gts.len();
    if npos == 0 && dets.is_empty() {
        return ThresholdEval { ap: None, recall: None };
    }
    if npos == 0 {
        return ThresholdEval {
            ap: Some(0.0),
            recall: None,
        };
    }

    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().1.push(i);
    }

    // (score, input index, tp)
    let mut ranked: Vec<(f64, usize, bool)> = Vec::with_capacity(dets.len());
    for (det_idx, gt_idx) in by_image.values() {
        let image_dets: Vec<Detection> = det_idx.iter().map(|&i| dets[i]).collect();
        let image_gts: Vec<GroundTruthAnnotation> = gt_idx.iter().map(|&i| gts[i]).collect();
        let mut order = score_order(&image_dets, |d| d.score);
        order.truncate(cfg.max_detections_per_image);
        let m = match_in_order(&image_dets, &order, &image_gts, t);
        ranked.extend(order.iter().map(|&k| (image_dets[k].score, det_idx[k], m.det_tp[k])));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, is_tp) in &ranked {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    ThresholdEval {
        ap: Some(interpolated_ap(&precision, &recall, cfg.recall_samples)),
        recall: Some(tp as f64 / npos as f64),
    }
}

/// Mean over `samples` evenly spaced recall levels in [0, 1] of the best
/// precision achieved at recall >= that level (0 when never reached).
fn interpolated_ap(precision: &[f64], recall: &[f64], samples: usize) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let steps = (samples - 1) as f64;
    let mut sum = 0.0;
    let mut cursor = 0;
    for k in 0..samples {
        let level = k as f64 / steps;
        while cursor < recall.len() && recall[cursor] < level {
            cursor += 1;
        }
        if cursor < recall.len() {
            sum += envelope[cursor];
        }
    }
    sum / samples as f64
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1(precision_like: f64, recall_like: f64) -> f64 {
    let denom = precision_like + recall_like;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * precision_like * recall_like / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: u64,
    /// One entry per configured threshold; empty for summary-only records.
    pub ap_per_threshold: Vec<f64>,
    pub ap_all: f64,
    pub ap_50: f64,
    /// Mean over thresholds of the best recall; `None` without ground truths
    /// or for summary-only records.
    pub recall: Option<f64>,
}

impl ClassEval {
    /// A record carrying only the two headline AP numbers, e.g. values
    /// transcribed from a published per-class table.
    pub fn from_summary(class_id: u64, ap_all: f64, ap_50: f64) -> Self {
        Self {
            class_id,
            ap_per_threshold: Vec::new(),
            ap_all,
            ap_50,
            recall: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub per_class: Vec<ClassEval>,
    pub map_all: f64,
    pub map_50: f64,
    pub average_recall: Option<f64>,
    pub f1: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates one class. `None` means the class is left out of aggregation.
pub fn evaluate_class(
    class_id: u64,
    dets: &[Detection],
    gts: &[GroundTruthAnnotation],
    cfg: &EvalConfig,
) -> Option<ClassEval> {
    if gts.is_empty() && (dets.is_empty() || cfg.absent_classes == AbsentClassPolicy::Skip) {
        return None;
    }
    let per_t: Vec<ThresholdEval> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| evaluate_threshold(dets, gts, t, cfg))
        .collect();
    let ap_per_threshold: Vec<f64> = per_t.iter().map(|e| e.ap.unwrap_or(0.0)).collect();
    let ap_50 = match cfg.iou_thresholds.iter().position(|t| (t - 0.5).abs() < 1e-12) {
        Some(i) => ap_per_threshold[i],
        None => evaluate_threshold(dets, gts, 0.5, cfg).ap.unwrap_or(0.0),
    };
    let recall = if gts.is_empty() {
        None
    } else {
        mean(per_t.iter().filter_map(|e| e.recall))
    };
    Some(ClassEval {
        class_id,
        ap_all: mean(ap_per_threshold.iter().copied()).unwrap_or(0.0),
        ap_per_threshold,
        ap_50,
        recall,
    })
}

/// Full evaluation: every class present in either input, fanned out in parallel.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruthAnnotation], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let classes: BTreeSet<u64> = dets
        .iter()
        .map(|d| d.class_id)
        .chain(gts.iter().map(|g| g.class_id))
        .collect();
    let per_class: Vec<ClassEval> = classes
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter_map(|c| {
            let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let class_gts: Vec<GroundTruthAnnotation> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            evaluate_class(c, &class_dets, &class_gts, cfg)
        })
        .collect();
    aggregate(per_class, cfg)
}

/// Unweighted class means and F1 = harmonic mean of mAP@[.50:.95] and AR.
pub fn aggregate(per_class: Vec<ClassEval>, cfg: &EvalConfig) -> Result<EvalReport> {
    if per_class.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let map_all = mean(per_class.iter().map(|c| c.ap_all)).unwrap_or(0.0);
    let map_50 = mean(per_class.iter().map(|c| c.ap_50)).unwrap_or(0.0);
    let average_recall = mean(per_class.iter().filter_map(|c| c.recall));
    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        map_all,
        map_50,
        f1: average_recall.map(|ar| f1(map_all, ar)),
        average_recall,
        per_class,
    })
}
