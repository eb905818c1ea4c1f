//! Bounding-box regression losses with analytic gradients.
//!
//! Every loss takes the ground-truth box first and the predicted box second
//! and differentiates with respect to the predicted corners
//! `(x_min, y_min, x_max, y_max)`.
//!
//! Where the loss is not differentiable (L1 coordinate ties, edges that
//! coincide between the two boxes, the exact overlap boundary) a one-sided
//! derivative is used: a `max`/`min` tie contributes nothing, and
//! touching boxes are treated as non-overlapping.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};

/// IoU at or above which the CIoU aspect-ratio term switches on.
pub const CIOU_ASPECT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Iou,
    Giou,
    Diou,
    Ciou,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::L1,
        LossKind::Iou,
        LossKind::Giou,
        LossKind::Diou,
        LossKind::Ciou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Iou => "iou",
            LossKind::Giou => "giou",
            LossKind::Diou => "diou",
            LossKind::Ciou => "ciou",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind `{s}`")))
    }
}

/// Aspect-ratio consistency term `v` and its trade-off weight `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CiouInternals {
    pub v: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `dL/d(x_min, y_min, x_max, y_max)` of the predicted box.
    pub gradient: [f64; 4],
    /// Present only for [`LossKind::Ciou`].
    pub ciou: Option<CiouInternals>,
}

impl LossResult {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn loss(kind: LossKind, gt: &BBox, pred: &BBox) -> Result<LossResult> {
    match kind {
        LossKind::L1 => Ok(loss_l1(gt, pred)),
        LossKind::Iou => loss_iou(gt, pred),
        LossKind::Giou => loss_giou(gt, pred),
        LossKind::Diou => loss_diou(gt, pred),
        LossKind::Ciou => loss_ciou(gt, pred),
    }
}

/// Mean absolute difference over the four corner coordinates.
pub fn loss_l1(gt: &BBox, pred: &BBox) -> LossResult {
    let g = gt.to_array();
    let p = pred.to_array();
    let mut value = 0.0;
    let mut gradient = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - g[i];
        value += d.abs();
        gradient[i] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    LossResult {
        value: value / 4.0,
        gradient,
        ciou: None,
    }
}

/// `1 - IoU`. The gradient is exactly zero whenever the boxes do not overlap.
pub fn loss_iou(gt: &BBox, pred: &BBox) -> Result<LossResult> {
    let o = Overlap::new(gt, pred)?;
    Ok(LossResult {
        value: 1.0 - o.iou,
        gradient: o.d_iou.map(|d| -d),
        ciou: None,
    })
}

/// `1 - IoU + (A_c - U) / A_c` with `A_c` the enclosing-box area.
pub fn loss_giou(gt: &BBox, pred: &BBox) -> Result<LossResult> {
    let o = Overlap::new(gt, pred)?;
    let e = Enclosure::new(gt, pred);
    let ac = e.area();
    let d_ac = e.d_area();
    let mut gradient = [0.0; 4];
    for i in 0..4 {
        // d/dp of -U/A_c
        gradient[i] = -o.d_iou[i] - (o.d_union[i] * ac - o.union * d_ac[i]) / (ac * ac);
    }
    Ok(LossResult {
        value: 1.0 - o.iou + (ac - o.union) / ac,
        gradient,
        ciou: None,
    })
}

/// `1 - IoU + rho^2 / c^2`: squared center distance over squared enclosing diagonal.
pub fn loss_diou(gt: &BBox, pred: &BBox) -> Result<LossResult> {
    let o = Overlap::new(gt, pred)?;
    let (value, gradient) = diou_parts(gt, pred, &o);
    Ok(LossResult {
        value,
        gradient,
        ciou: None,
    })
}

/// DIoU plus `alpha * v`, where `v` penalizes aspect-ratio mismatch and
/// `alpha = v / ((1 - IoU) + v)` for IoU >= 0.5, zero below.
///
/// `alpha` is held constant when differentiating. Both boxes need positive
/// width and height.
pub fn loss_ciou(gt: &BBox, pred: &BBox) -> Result<LossResult> {
    let o = Overlap::new(gt, pred)?;
    let aspect = Aspect::new(gt, pred)?;
    let alpha = ciou_alpha(o.iou, aspect.v);
    let (diou, mut gradient) = diou_parts(gt, pred, &o);
    for (g, dv) in gradient.iter_mut().zip(aspect.d_v) {
        *g += alpha * dv;
    }
    Ok(LossResult {
        value: diou + alpha * aspect.v,
        gradient,
        ciou: Some(CiouInternals { v: aspect.v, alpha }),
    })
}

/// The aspect-ratio trade-off weight.
pub fn ciou_alpha(iou: f64, v: f64) -> f64 {
    if iou < CIOU_ASPECT_IOU_THRESHOLD {
        return 0.0;
    }
    let denom = (1.0 - iou) + v;
    if denom > 0.0 {
        v / denom
    } else {
        0.0
    }
}

/// Central-difference gradient of `kind` with respect to the predicted box.
///
/// For CIoU, `alpha` is frozen at its value for the unperturbed `pred`,
/// which is the same convention the analytic gradient uses.
pub fn finite_diff_gradient(kind: LossKind, gt: &BBox, pred: &BBox, h: f64) -> Result<[f64; 4]> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let frozen_alpha = match kind {
        LossKind::Ciou => loss_ciou(gt, pred)?.ciou.map(|c| c.alpha),
        _ => None,
    };
    let eval = |p: &BBox| -> Result<f64> {
        match frozen_alpha {
            Some(alpha) => {
                let v = Aspect::new(gt, p)?.v;
                Ok(loss_diou(gt, p)?.value + alpha * v)
            }
            None => Ok(loss(kind, gt, p)?.value),
        }
    };
    let base = pred.to_array();
    let mut out = [0.0; 4];
    for i in 0..4 {
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let lp = eval(&BBox::try_from(plus)?)?;
        let lm = eval(&BBox::try_from(minus)?)?;
        out[i] = (lp - lm) / (2.0 * h);
    }
    Ok(out)
}

fn diou_parts(gt: &BBox, pred: &BBox, o: &Overlap) -> (f64, [f64; 4]) {
    let e = Enclosure::new(gt, pred);
    let c2 = e.width * e.width + e.height * e.height;
    let d_c2: [f64; 4] =
        std::array::from_fn(|i| 2.0 * e.width * e.d_width[i] + 2.0 * e.height * e.d_height[i]);

    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let (dx, dy) = (pcx - gcx, pcy - gcy);
    let rho2 = dx * dx + dy * dy;
    // each corner moves its center by half the step
    let d_rho2 = [dx, dy, dx, dy];

    let gradient = std::array::from_fn(|i| -o.d_iou[i] + (d_rho2[i] * c2 - rho2 * d_c2[i]) / (c2 * c2));
    (1.0 - o.iou + rho2 / c2, gradient)
}

/// Intersection, union and IoU with their derivatives w.r.t. the predicted corners.
struct Overlap {
    iou: f64,
    union: f64,
    d_union: [f64; 4],
    d_iou: [f64; 4],
}

impl Overlap {
    fn new(gt: &BBox, pred: &BBox) -> Result<Self> {
        let iw = pred.x_max().min(gt.x_max()) - pred.x_min().max(gt.x_min());
        let ih = pred.y_max().min(gt.y_max()) - pred.y_min().max(gt.y_min());
        let overlapping = iw > 0.0 && ih > 0.0;

        let (inter, d_inter) = if overlapping {
            let d = [
                if pred.x_min() > gt.x_min() { -ih } else { 0.0 },
                if pred.y_min() > gt.y_min() { -iw } else { 0.0 },
                if pred.x_max() < gt.x_max() { ih } else { 0.0 },
                if pred.y_max() < gt.y_max() { iw } else { 0.0 },
            ];
            (iw * ih, d)
        } else {
            (0.0, [0.0; 4])
        };

        let (pw, ph) = (pred.width(), pred.height());
        let d_area_pred = [-ph, -pw, ph, pw];
        let union = pred.area() + gt.area() - inter;
        if !(union > 0.0) {
            return Err(Error::UndefinedIou);
        }
        let d_union: [f64; 4] = std::array::from_fn(|i| d_area_pred[i] - d_inter[i]);
        let d_iou = if overlapping {
            std::array::from_fn(|i| (d_inter[i] * union - inter * d_union[i]) / (union * union))
        } else {
            [0.0; 4]
        };
        Ok(Self {
            iou: (inter / union).clamp(0.0, 1.0),
            union,
            d_union,
            d_iou,
        })
    }
}

/// Enclosing-box extents and their derivatives w.r.t. the predicted corners.
struct Enclosure {
    width: f64,
    height: f64,
    d_width: [f64; 4],
    d_height: [f64; 4],
}

impl Enclosure {
    fn new(gt: &BBox, pred: &BBox) -> Self {
        let hull = geometry::enclosing_box(gt, pred);
        let d_width = [
            if pred.x_min() < gt.x_min() { -1.0 } else { 0.0 },
            0.0,
            if pred.x_max() > gt.x_max() { 1.0 } else { 0.0 },
            0.0,
        ];
        let d_height = [
            0.0,
            if pred.y_min() < gt.y_min() { -1.0 } else { 0.0 },
            0.0,
            if pred.y_max() > gt.y_max() { 1.0 } else { 0.0 },
        ];
        Self {
            width: hull.width(),
            height: hull.height(),
            d_width,
            d_height,
        }
    }

    fn area(&self) -> f64 {
        self.width * self.height
    }

    fn d_area(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.d_width[i] * self.height + self.width * self.d_height[i])
    }
}

struct Aspect {
    v: f64,
    d_v: [f64; 4],
}

impl Aspect {
    fn new(gt: &BBox, pred: &BBox) -> Result<Self> {
        if !gt.has_positive_area() || !pred.has_positive_area() {
            return Err(Error::DegenerateAspect);
        }
        let k = 4.0 / (PI * PI);
        let (pw, ph) = (pred.width(), pred.height());
        let diff = (gt.width() / gt.height()).atan() - (pw / ph).atan();
        let r2 = pw * pw + ph * ph;
        // d atan(w/h) = (h dw - w dh) / (w^2 + h^2)
        let dv_dw = -2.0 * k * diff * ph / r2;
        let dv_dh = 2.0 * k * diff * pw / r2;
        Ok(Self {
            v: k * diff * diff,
            d_v: [-dv_dw, -dv_dh, dv_dw, dv_dh],
        })
    }
}
