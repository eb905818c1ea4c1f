//! Axis-aligned boxes in continuous corner form.
//!
//! Width is `x_max - x_min` with no "+1" pixel convention. Two boxes that only
//! share an edge have zero intersection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle `(x_min, y_min, x_max, y_max)`.
///
/// Coordinates are finite and `x_max >= x_min`, `y_max >= y_min`. Zero-area
/// boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_max < x_min || y_max < y_min {
            return Err(invalid("negative extent"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from `(x, y, width, height)`.
    pub fn from_xywh(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(x, y, x + width, y + height)
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    /// Builds a box from two arbitrary corners, ordering each axis.
    pub fn from_unordered(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Corner coordinates in `(x_min, y_min, x_max, y_max)` order.
    #[inline]
    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// `(x, y, width, height)` storage form.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Scales all coordinates about the origin. `factor` must be positive.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Self::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x <= self.x_max && self.y_min <= y && y <= self.y_max
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Every pairwise scalar the IoU-family losses need, computed in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryScalars {
    pub intersection_area: f64,
    pub union_area: f64,
    pub iou: f64,
    pub enclosing_area: f64,
    pub center_distance_sq: f64,
    pub enclosing_diag_sq: f64,
}

impl GeometryScalars {
    /// Fails with [`Error::UndefinedIou`] when both boxes have zero area.
    pub fn between(a: &BBox, b: &BBox) -> Result<Self> {
        let intersection_area = intersection_area(a, b);
        let union_area = area(a) + area(b) - intersection_area;
        if !(union_area > 0.0) {
            return Err(Error::UndefinedIou);
        }
        let hull = enclosing_box(a, b);
        Ok(Self {
            intersection_area,
            union_area,
            iou: (intersection_area / union_area).clamp(0.0, 1.0),
            enclosing_area: area(&hull),
            center_distance_sq: center_distance_sq(a, b),
            enclosing_diag_sq: hull.width().powi(2) + hull.height().powi(2),
        })
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

/// Overlap area; zero for disjoint or edge-touching boxes.
pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Errors when both boxes have zero area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if !(union > 0.0) {
        return Err(Error::UndefinedIou);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU where a zero-area/zero-area pair counts as no overlap.
pub(crate) fn iou_or_zero(a: &BBox, b: &BBox) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

/// Smallest axis-aligned box containing both inputs.
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

pub fn center_distance_sq(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

/// Squared diagonal of [`enclosing_box`].
pub fn enclosing_diag_sq(a: &BBox, b: &BBox) -> f64 {
    let hull = enclosing_box(a, b);
    hull.width().powi(2) + hull.height().powi(2)
}
