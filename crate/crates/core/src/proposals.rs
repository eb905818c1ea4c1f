//! Region-proposal machinery: anchor tiling, box-delta coding, greedy NMS and
//! IoU-threshold assignment.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};

pub const DEFAULT_NMS_IOU_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MAX_PROPOSALS: usize = 1000;
pub const DEFAULT_POSITIVE_IOU_THRESHOLD: f64 = 0.5;

/// Anchor layout for a feature pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scale: u32,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// One stride per pyramid level, strictly increasing.
    pub strides: Vec<u32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            strides: vec![4, 8, 16, 32],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::InvalidArgument("anchor scale must be positive".into()));
        }
        if self.aspect_ratios.is_empty() || !self.aspect_ratios.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(Error::InvalidArgument(
                "aspect ratios must be a non-empty list of positive numbers".into(),
            ));
        }
        if self.strides.is_empty()
            || self.strides[0] == 0
            || self.strides.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidArgument(
                "strides must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Feature-map sizes for an image, `ceil(dim / stride)` per level.
    pub fn feature_sizes_for_image(&self, image_height: u32, image_width: u32) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (image_height.div_ceil(s) as usize, image_width.div_ceil(s) as usize))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Tiles anchors over every cell of every level.
///
/// Output order is level, row, column, then aspect ratio. Each anchor has
/// area `(stride * scale)^2` and is centered on its cell. Anchors are not
/// clipped to the image.
pub fn generate_anchors(cfg: &AnchorConfig, feature_sizes: &[(usize, usize)]) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    if feature_sizes.len() != cfg.strides.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sizes given for {} strides",
            feature_sizes.len(),
            cfg.strides.len()
        )));
    }
    let total: usize = feature_sizes.iter().map(|(h, w)| h * w).sum::<usize>() * cfg.aspect_ratios.len();
    let mut anchors = Vec::with_capacity(total);
    for (level, (&stride, &(rows, cols))) in cfg.strides.iter().zip(feature_sizes).enumerate() {
        let stride = f64::from(stride);
        let base = stride * f64::from(cfg.scale);
        let shapes: Vec<(f64, f64)> = cfg
            .aspect_ratios
            .iter()
            .map(|r| (base * r.sqrt(), base / r.sqrt()))
            .collect();
        for row in 0..rows {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..cols {
                let cx = (col as f64 + 0.5) * stride;
                for &(w, h) in &shapes {
                    anchors.push(Anchor {
                        bbox: BBox::from_center(cx, cy, w, h)?,
                        level,
                        row,
                        col,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// Center offsets normalized by anchor size, and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

fn require_positive_extent(anchor: &BBox) -> Result<()> {
    if anchor.has_positive_area() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "anchor {:?} has a nonpositive extent",
            anchor.to_array()
        )))
    }
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    require_positive_extent(anchor)?;
    if !target.has_positive_area() {
        return Err(Error::InvalidArgument(format!(
            "target {:?} has a nonpositive extent",
            target.to_array()
        )));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        tx: (tcx - acx) / anchor.width(),
        ty: (tcy - acy) / anchor.height(),
        tw: (target.width() / anchor.width()).ln(),
        th: (target.height() / anchor.height()).ln(),
    })
}

pub fn decode_delta(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    require_positive_extent(anchor)?;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        acx + delta.tx * aw,
        acy + delta.ty * ah,
        aw * delta.tw.exp(),
        ah * delta.th.exp(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score })
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        score(&items[b])
            .partial_cmp(&score(&items[a]))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `candidates` in descending score order. A candidate is
/// dropped when its IoU with an already kept box is strictly greater than
/// `iou_threshold`. At most `max_keep` indices are returned.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64, max_keep: usize) -> Result<Vec<usize>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "NMS threshold {iou_threshold} outside (0, 1]"
        )));
    }
    if max_keep == 0 {
        return Err(Error::InvalidArgument("max_keep must be positive".into()));
    }
    let mut kept: Vec<usize> = Vec::new();
    for idx in score_order(candidates, |c| c.score) {
        if kept.len() == max_keep {
            break;
        }
        let b = &candidates[idx].bbox;
        if kept
            .iter()
            .all(|&k| geometry::iou_or_zero(&candidates[k].bbox, b) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub positive: bool,
    /// Ground truth with the highest IoU; `None` when there are no ground truths.
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
}

/// Labels each proposal positive iff its best ground-truth IoU exceeds
/// `pos_threshold`. Ties in IoU go to the lower ground-truth index.
pub fn assign_proposals(proposals: &[BBox], gts: &[BBox], pos_threshold: f64) -> Result<Vec<Assignment>> {
    if !(pos_threshold > 0.0 && pos_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "positive threshold {pos_threshold} outside (0, 1)"
        )));
    }
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let v = geometry::iou_or_zero(p, g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            Assignment {
                positive: max_iou > pos_threshold,
                matched_gt: best.map(|(j, _)| j),
                max_iou,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Suppression written the other way round: take the best remaining box,
    /// then strike out everything that overlaps it too much.
    pub(super) fn brute_force_nms(c: &[ScoredBox], thr: f64, max_keep: usize) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..c.len()).collect();
        let mut out = Vec::new();
        while !remaining.is_empty() && out.len() < max_keep {
            let mut best_pos = 0;
            for (pos, &i) in remaining.iter().enumerate() {
                let b = remaining[best_pos];
                if c[i].score > c[b].score || (c[i].score == c[b].score && i < b) {
                    best_pos = pos;
                }
            }
            let best = remaining.remove(best_pos);
            out.push(best);
            remaining.retain(|&i| {
                let inter = geometry::intersection_area(&c[i].bbox, &c[best].bbox);
                let union = c[i].bbox.area() + c[best].bbox.area() - inter;
                union <= 0.0 || inter / union <= thr
            });
        }
        out
    }

    #[test]
    fn anchor_examples() {
        let cfg = AnchorConfig {
            scale: 8,
            aspect_ratios: vec![1.0],
            strides: vec![16],
        };
        let a = generate_anchors(&cfg, &[(1, 1)]).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox, bx(-56.0, -56.0, 72.0, 72.0));
        assert_eq!(a[0].bbox.center(), (8.0, 8.0));

        let cfg = AnchorConfig {
            strides: vec![16],
            ..AnchorConfig::default()
        };
        let a = generate_anchors(&cfg, &[(2, 3)]).unwrap();
        assert_eq!(a.len(), 18);
        let area_r1 = a.iter().find(|x| (x.bbox.width() - x.bbox.height()).abs() < 1e-9).unwrap().bbox.area();
        let r2 = a.iter().find(|x| x.bbox.width() > x.bbox.height()).unwrap();
        assert!((r2.bbox.width() / r2.bbox.height() - 2.0).abs() < 1e-12);
        assert!((r2.bbox.area() - area_r1).abs() < 1e-9);
        assert!((area_r1 - 128.0 * 128.0).abs() < 1e-9);
    }

    #[test]
    fn anchor_count_and_centers_over_pyramid() {
        let cfg = AnchorConfig::default();
        let sizes = cfg.feature_sizes_for_image(640, 360);
        assert_eq!(sizes, vec![(160, 90), (80, 45), (40, 23), (20, 12)]);
        let anchors = generate_anchors(&cfg, &sizes).unwrap();
        let expected: usize = sizes.iter().map(|(h, w)| h * w * 3).sum();
        assert_eq!(anchors.len(), expected);
        for a in anchors.iter().step_by(97) {
            let stride = f64::from(cfg.strides[a.level]);
            let (cx, cy) = a.bbox.center();
            assert!((cx - (a.col as f64 + 0.5) * stride).abs() < 1e-9);
            assert!((cy - (a.row as f64 + 0.5) * stride).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_config_errors() {
        let cfg = AnchorConfig::default();
        assert!(generate_anchors(&cfg, &[(1, 1)]).is_err());
        let bad = AnchorConfig {
            strides: vec![8, 8],
            ..AnchorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnchorConfig {
            aspect_ratios: vec![0.0],
            ..AnchorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnchorConfig {
            scale: 0,
            ..AnchorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn delta_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(encode_delta(&a, &a).unwrap(), BoxDelta::default());
        assert_eq!(decode_delta(&a, &BoxDelta::default()).unwrap(), a);
        let d = encode_delta(&a, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert_eq!(d, BoxDelta { tx: 0.5, ty: 0.5, tw: 0.0, th: 0.0 });
        assert!(encode_delta(&bx(0.0, 0.0, 0.0, 2.0), &a).is_err());
        assert!(decode_delta(&bx(0.0, 0.0, 2.0, 0.0), &d).is_err());
    }

    #[test]
    fn nms_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[ScoredBox::new(b, 0.5).unwrap()], 0.7, 1000).unwrap(), vec![0]);
        let c = [ScoredBox::new(b, 0.8).unwrap(), ScoredBox::new(b, 0.9).unwrap()];
        assert_eq!(nms(&c, 0.7, 1000).unwrap(), vec![1]);
        // IoU exactly 0.5: (0,0,10,10) vs (0,0,10,5)
        let c = [
            ScoredBox::new(b, 0.9).unwrap(),
            ScoredBox::new(bx(0.0, 0.0, 10.0, 5.0), 0.8).unwrap(),
        ];
        assert_eq!(nms(&c, 0.7, 1000).unwrap(), vec![0, 1]);
        assert_eq!(nms(&c, 0.5, 1000).unwrap(), vec![0, 1]);
        assert_eq!(nms(&c, 0.49, 1000).unwrap(), vec![0]);
        assert!(nms(&[], 0.7, 10).unwrap().is_empty());
        assert!(nms(&c, 0.0, 10).is_err());
        assert!(nms(&c, 0.7, 0).is_err());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let c = [
            ScoredBox::new(bx(0.0, 0.0, 1.0, 1.0), 0.5).unwrap(),
            ScoredBox::new(bx(0.0, 0.0, 1.0, 1.0), 0.5).unwrap(),
            ScoredBox::new(bx(5.0, 5.0, 6.0, 6.0), 0.5).unwrap(),
        ];
        assert_eq!(nms(&c, 0.7, 10).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = rng.random_range(0..60);
            let c: Vec<ScoredBox> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..50.0);
                    let y = rng.random_range(0.0..50.0);
                    let w = rng.random_range(1.0..20.0);
                    let h = rng.random_range(1.0..20.0);
                    // coarse scores so ties occur
                    let s = f64::from(rng.random_range(0..20u32)) / 19.0;
                    ScoredBox::new(BBox::from_xywh(x, y, w, h).unwrap(), s).unwrap()
                })
                .collect();
            for thr in [0.3, 0.5, 0.7, 0.9] {
                let max_keep = 1 + trial % 40;
                assert_eq!(nms(&c, thr, max_keep).unwrap(), brute_force_nms(&c, thr, max_keep));
            }
        }
    }

    #[test]
    fn assignment_examples() {
        let p = bx(0.0, 0.0, 2.0, 2.0);
        let a = assign_proposals(&[p], &[p], 0.5).unwrap();
        assert!(a[0].positive);
        assert_eq!(a[0].max_iou, 1.0);
        assert_eq!(a[0].matched_gt, Some(0));

        // IoU 0.4: (0,0,10,10) vs (0,0,10,4)
        let a = assign_proposals(&[bx(0.0, 0.0, 10.0, 4.0)], &[bx(0.0, 0.0, 10.0, 10.0)], 0.5).unwrap();
        assert!(!a[0].positive);
        assert!((a[0].max_iou - 0.4).abs() < 1e-12);

        let a = assign_proposals(&[p], &[bx(1.0, 1.0, 3.0, 3.0), bx(0.0, 0.0, 2.0, 3.0)], 0.5).unwrap();
        assert!(a[0].positive);
        assert_eq!(a[0].matched_gt, Some(1));
        assert!((a[0].max_iou - 2.0 / 3.0).abs() < 1e-12);

        let a = assign_proposals(&[p], &[], 0.5).unwrap();
        assert_eq!(a[0], Assignment { positive: false, matched_gt: None, max_iou: 0.0 });

        let a = assign_proposals(&[p], &[p, p], 0.5).unwrap();
        assert_eq!(a[0].matched_gt, Some(0));
        assert!(assign_proposals(&[p], &[p], 1.0).is_err());
    }

    fn arb_scored() -> impl Strategy<Value = Vec<ScoredBox>> {
        prop::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..15.0f64, 1.0..15.0f64, 0.0..=1.0f64)
                .prop_map(|(x, y, w, h, s)| ScoredBox::new(BBox::from_xywh(x, y, w, h).unwrap(), s).unwrap()),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn nms_is_idempotent_and_bounded(c in arb_scored(), thr in 0.05..=1.0f64, max_keep in 1usize..30) {
            let kept = nms(&c, thr, max_keep).unwrap();
            prop_assert!(kept.len() <= max_keep);
            let subset: Vec<ScoredBox> = kept.iter().map(|&i| c[i]).collect();
            let again = nms(&subset, thr, max_keep).unwrap();
            prop_assert_eq!(again, (0..subset.len()).collect::<Vec<_>>());
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(geometry::iou_or_zero(&c[a].bbox, &c[b].bbox) <= thr);
                    prop_assert!(c[a].score >= c[b].score);
                }
            }
        }

        #[test]
        fn nms_threshold_one_never_removes_distinct_boxes(c in arb_scored()) {
            let mut with_dupes = c.clone();
            with_dupes.extend(c.iter().map(|s| ScoredBox { score: s.score / 2.0, ..*s }));
            let kept = nms(&with_dupes, 1.0, usize::MAX).unwrap();
            // strict comparison: IoU can never exceed 1, so nothing is suppressed
            prop_assert_eq!(kept.len(), with_dupes.len());
        }

        #[test]
        fn delta_round_trip(
            ax in -500.0..500.0f64, ay in -500.0..500.0f64, aw in 1.0..400.0f64, ah in 1.0..400.0f64,
            tx in -500.0..500.0f64, ty in -500.0..500.0f64, tw in 1.0..400.0f64, th in 1.0..400.0f64,
        ) {
            let anchor = BBox::from_xywh(ax, ay, aw, ah).unwrap();
            let target = BBox::from_xywh(tx, ty, tw, th).unwrap();
            let back = decode_delta(&anchor, &encode_delta(&anchor, &target).unwrap()).unwrap();
            for (a, b) in back.to_array().iter().zip(target.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
