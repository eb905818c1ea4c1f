//! Geometric augmentation applied to box coordinates.
//!
//! Only transforms that move boxes are modelled here: horizontal flip and a
//! composite shift/scale/rotate. Colour and blur augmentations leave boxes
//! untouched and have no representation beyond the notes on
//! [`AugmentParams`].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Boxes smaller than this after clipping are dropped.
pub const MIN_KEPT_AREA: f64 = 1.0;

/// Sampling bounds for the geometric augmentations.
///
/// The training recipe these defaults come from also applied brightness and
/// contrast jitter, RGB and HSV shifts, channel shuffling and blur; none of
/// those change box coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Probability of applying shift/scale/rotate at all.
    pub shift_scale_rotate_prob: f64,
    /// Maximum shift as a fraction of image width (x) and height (y).
    pub max_shift_frac: f64,
    /// Scale is drawn from `[1 - max_scale_delta, 1 + max_scale_delta]`.
    pub max_scale_delta: f64,
    pub max_rotate_deg: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl AugmentParams {
    pub fn new(image_width: f64, image_height: f64) -> Self {
        Self {
            flip_prob: 0.5,
            shift_scale_rotate_prob: 1.0,
            max_shift_frac: 0.0625,
            max_scale_delta: 0.1,
            max_rotate_deg: 45.0,
            image_width,
            image_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("augment params: {what}")));
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.shift_scale_rotate_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.max_shift_frac >= 0.0) || !(self.max_scale_delta >= 0.0) || self.max_scale_delta >= 1.0 {
            return bad("shift fraction must be >= 0 and scale delta in [0, 1)");
        }
        if !(0.0..180.0).contains(&self.max_rotate_deg) {
            return bad("rotation bound must lie in [0, 180)");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image dimensions must be positive");
        }
        Ok(())
    }
}

/// Mirror a box across the vertical center line of an image of width `image_width`.
pub fn flip_box_h(b: &BBox, image_width: f64) -> BBox {
    BBox::new(image_width - b.x_max(), b.y_min(), image_width - b.x_min(), b.y_max())
        .expect("reflection of a valid box is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

/// Scales by `s` and rotates by `angle_deg` about the image center, then
/// shifts by `(dx, dy)` pixels. The result is the axis-aligned hull of the
/// four transformed corners.
///
/// With `clip`, the hull is intersected with the image, and `None` is returned
/// when less than [`MIN_KEPT_AREA`] remains. Rotation is counter-clockwise in
/// a y-up frame.
pub fn shift_scale_rotate_box(
    b: &BBox,
    dx: f64,
    dy: f64,
    s: f64,
    angle_deg: f64,
    image: ImageSize,
    clip: bool,
) -> Option<BBox> {
    let (cx, cy) = (image.width / 2.0, image.height / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let map = |x: f64, y: f64| {
        let (u, v) = ((x - cx) * s, (y - cy) * s);
        (cx + u * cos - v * sin + dx, cy + u * sin + v * cos + dy)
    };
    let corners = [
        map(b.x_min(), b.y_min()),
        map(b.x_max(), b.y_min()),
        map(b.x_max(), b.y_max()),
        map(b.x_min(), b.y_max()),
    ];
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        corners.iter().map(pick).fold(init, f)
    };
    let mut x0 = fold(f64::min, f64::INFINITY, |c| c.0);
    let mut y0 = fold(f64::min, f64::INFINITY, |c| c.1);
    let mut x1 = fold(f64::max, f64::NEG_INFINITY, |c| c.0);
    let mut y1 = fold(f64::max, f64::NEG_INFINITY, |c| c.1);
    if clip {
        x0 = x0.clamp(0.0, image.width);
        x1 = x1.clamp(0.0, image.width);
        y0 = y0.clamp(0.0, image.height);
        y1 = y1.clamp(0.0, image.height);
    }
    let out = BBox::new(x0, y0, x1, y1).ok()?;
    if clip && out.area() < MIN_KEPT_AREA {
        return None;
    }
    Some(out)
}

/// Sampled decisions for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageAugment {
    pub image: usize,
    pub flip: bool,
    pub shift_scale_rotate: bool,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub seed: u64,
    pub images: Vec<ImageAugment>,
}

/// Boxes of one image after augmentation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentedBoxes {
    pub kept: Vec<BBox>,
    /// Input indices of boxes that were clipped away.
    pub dropped: Vec<usize>,
}

/// Draws per-image decisions. A pure function of `(params, n_images, seed)`.
pub fn sample_plan(params: &AugmentParams, n_images: usize, seed: u64) -> Result<AugmentPlan> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symmetric = |rng: &mut ChaCha8Rng, bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let images = (0..n_images)
        .map(|image| {
            // every draw happens regardless of the flags, so one image's
            // decisions never shift another's
            let flip = rng.random_bool(params.flip_prob);
            let ssr = rng.random_bool(params.shift_scale_rotate_prob);
            let dx = symmetric(&mut rng, params.max_shift_frac * params.image_width);
            let dy = symmetric(&mut rng, params.max_shift_frac * params.image_height);
            let scale = 1.0 + symmetric(&mut rng, params.max_scale_delta);
            let angle_deg = symmetric(&mut rng, params.max_rotate_deg);
            if ssr {
                ImageAugment { image, flip, shift_scale_rotate: true, dx, dy, scale, angle_deg }
            } else {
                ImageAugment { image, flip, shift_scale_rotate: false, dx: 0.0, dy: 0.0, scale: 1.0, angle_deg: 0.0 }
            }
        })
        .collect();
    Ok(AugmentPlan { seed, images })
}

impl AugmentPlan {
    /// Applies image `image`'s decisions (flip first) to `boxes`, clipping to the image.
    pub fn apply(&self, image: usize, boxes: &[BBox], params: &AugmentParams) -> Result<AugmentedBoxes> {
        let step = self
            .images
            .get(image)
            .ok_or_else(|| Error::InvalidArgument(format!("plan has no image {image}")))?;
        let size = ImageSize {
            width: params.image_width,
            height: params.image_height,
        };
        let mut out = AugmentedBoxes::default();
        for (i, b) in boxes.iter().enumerate() {
            let b = if step.flip { flip_box_h(b, size.width) } else { *b };
            let moved = if step.shift_scale_rotate {
                shift_scale_rotate_box(&b, step.dx, step.dy, step.scale, step.angle_deg, size, true)
            } else {
                Some(b)
            };
            match moved {
                Some(m) => out.kept.push(m),
                None => out.dropped.push(i),
            }
        }
        Ok(out)
    }

    /// One CSV row per image, preceded by a `# seed=<n>` comment line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# seed={}", self.seed).map_err(|e| Error::Csv(e.into()))?;
        let mut writer = csv::Writer::from_writer(w);
        for row in &self.images {
            writer.serialize(row)?;
        }
        writer.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text).map_err(|e| Error::Csv(e.into()))?;
        let parse_err = |message: String| Error::Parse {
            path: "<augment plan>".into(),
            message,
        };
        let first = text.lines().next().unwrap_or_default();
        let seed = first
            .strip_prefix("# seed=")
            .ok_or_else(|| parse_err("missing `# seed=` header".into()))?
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad seed: {e}")))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let images = reader.deserialize().collect::<Result<Vec<ImageAugment>, _>>()?;
        Ok(Self { seed, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_box_h(&bx(2.0, 3.0, 4.0, 5.0), 10.0), bx(6.0, 3.0, 8.0, 5.0));
        let centered = bx(3.0, 1.0, 7.0, 2.0);
        assert_eq!(flip_box_h(&centered, 10.0), centered);
        let b = bx(0.5, 1.0, 3.25, 9.0);
        assert_eq!(flip_box_h(&flip_box_h(&b, 10.0), 10.0), b);
    }

    #[test]
    fn shift_scale_rotate_examples() {
        let img = ImageSize { width: 100.0, height: 100.0 };
        let b = bx(10.0, 20.0, 30.0, 60.0);
        assert_eq!(shift_scale_rotate_box(&b, 0.0, 0.0, 1.0, 0.0, img, true), Some(b));

        let centered = bx(40.0, 40.0, 60.0, 60.0);
        let r = shift_scale_rotate_box(&centered, 0.0, 0.0, 1.0, 90.0, img, false).unwrap();
        for (a, e) in r.to_array().iter().zip(centered.to_array()) {
            assert!((a - e).abs() < 1e-12);
        }

        let unit = ImageSize { width: 1.0, height: 1.0 };
        let r = shift_scale_rotate_box(&bx(0.0, 0.0, 1.0, 1.0), 0.0, 0.0, 1.0, 45.0, unit, false).unwrap();
        let expect = [0.5 - FRAC_1_SQRT_2, 0.5 - FRAC_1_SQRT_2, 0.5 + FRAC_1_SQRT_2, 0.5 + FRAC_1_SQRT_2];
        for (a, e) in r.to_array().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_drops_boxes_pushed_out_of_frame() {
        let img = ImageSize { width: 100.0, height: 100.0 };
        let b = bx(90.0, 10.0, 99.0, 20.0);
        assert!(shift_scale_rotate_box(&b, 20.0, 0.0, 1.0, 0.0, img, true).is_none());
        let unclipped = shift_scale_rotate_box(&b, 20.0, 0.0, 1.0, 0.0, img, false).unwrap();
        assert_eq!(unclipped, bx(110.0, 10.0, 119.0, 20.0));
        let partly = shift_scale_rotate_box(&b, 5.0, 0.0, 1.0, 0.0, img, true).unwrap();
        assert_eq!(partly, bx(95.0, 10.0, 100.0, 20.0));
    }

    #[test]
    fn plan_examples() {
        let params = AugmentParams::new(360.0, 640.0);
        assert!(sample_plan(&params, 0, 1).unwrap().images.is_empty());
        assert_eq!(sample_plan(&params, 50, 42).unwrap(), sample_plan(&params, 50, 42).unwrap());
        assert_ne!(sample_plan(&params, 50, 42).unwrap(), sample_plan(&params, 50, 43).unwrap());

        let plan = sample_plan(&params, 10_000, 7).unwrap();
        let flips = plan.images.iter().filter(|i| i.flip).count() as f64;
        // 3 sigma of Binomial(10000, 0.5) is 150
        assert!((flips - 5000.0).abs() <= 150.0, "{flips}");
        for step in &plan.images {
            assert!(step.dx.abs() <= 0.0625 * 360.0);
            assert!(step.dy.abs() <= 0.0625 * 640.0);
            assert!((0.9..=1.1).contains(&step.scale));
            assert!(step.angle_deg.abs() <= 45.0);
        }
    }

    #[test]
    fn plan_respects_disabled_shift_scale_rotate() {
        let params = AugmentParams {
            shift_scale_rotate_prob: 0.0,
            ..AugmentParams::new(100.0, 100.0)
        };
        let plan = sample_plan(&params, 20, 1).unwrap();
        assert!(plan.images.iter().all(|i| !i.shift_scale_rotate && i.scale == 1.0 && i.angle_deg == 0.0));
        let bad = AugmentParams { max_rotate_deg: 180.0, ..AugmentParams::new(100.0, 100.0) };
        assert!(sample_plan(&bad, 1, 0).is_err());
    }

    #[test]
    fn plan_apply_records_drops() {
        let params = AugmentParams::new(100.0, 100.0);
        let plan = AugmentPlan {
            seed: 0,
            images: vec![ImageAugment {
                image: 0,
                flip: true,
                shift_scale_rotate: true,
                dx: -50.0,
                dy: 0.0,
                scale: 1.0,
                angle_deg: 0.0,
            }],
        };
        // flip sends (90..99) to (1..10), then the shift pushes it off the left edge
        let out = plan
            .apply(0, &[bx(90.0, 10.0, 99.0, 20.0), bx(0.0, 10.0, 20.0, 20.0)], &params)
            .unwrap();
        assert_eq!(out.dropped, vec![0]);
        assert_eq!(out.kept, vec![bx(30.0, 10.0, 50.0, 20.0)]);
        assert!(plan.apply(1, &[], &params).is_err());
    }

    #[test]
    fn plan_csv_round_trip() {
        let plan = sample_plan(&AugmentParams::new(360.0, 640.0), 25, 99).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=99\nimage,flip,shift_scale_rotate,dx,dy,scale,angle_deg\n"));
        assert_eq!(AugmentPlan::read_csv(buf.as_slice()).unwrap(), plan);
        assert!(AugmentPlan::read_csv("image,flip\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn flip_preserves_area_and_vertical_extent(x in 0.0..50.0f64, y in 0.0..50.0f64, w in 0.0..50.0f64, h in 0.0..50.0f64) {
            let b = BBox::from_xywh(x, y, w, h).unwrap();
            let f = flip_box_h(&b, 100.0);
            prop_assert!((f.area() - b.area()).abs() <= 1e-9 * (1.0 + b.area()));
            prop_assert_eq!((f.y_min(), f.y_max()), (b.y_min(), b.y_max()));
        }

        #[test]
        fn unrotated_transform_scales_area(x in 0.0..50.0f64, y in 0.0..50.0f64, w in 0.1..50.0f64, h in 0.1..50.0f64,
                                           s in 0.9..1.1f64, dx in -6.0..6.0f64, dy in -6.0..6.0f64) {
            let b = BBox::from_xywh(x, y, w, h).unwrap();
            let img = ImageSize { width: 100.0, height: 100.0 };
            let t = shift_scale_rotate_box(&b, dx, dy, s, 0.0, img, false).unwrap();
            prop_assert!((t.area() - b.area() * s * s).abs() <= 1e-9 * b.area());
        }

        #[test]
        fn hull_contains_every_transformed_point(x in 0.0..50.0f64, y in 0.0..50.0f64, w in 0.1..50.0f64, h in 0.1..50.0f64,
                                                 s in 0.9..1.1f64, angle in -45.0..45.0f64, dx in -6.0..6.0f64,
                                                 u in 0.0..=1.0f64, v in 0.0..=1.0f64) {
            let b = BBox::from_xywh(x, y, w, h).unwrap();
            let img = ImageSize { width: 100.0, height: 100.0 };
            let hull = shift_scale_rotate_box(&b, dx, -dx, s, angle, img, false).unwrap();
            // independent transform of an interior point
            let (px, py) = (x + u * w, y + v * h);
            let th = angle.to_radians();
            let (qx, qy) = ((px - 50.0) * s, (py - 50.0) * s);
            let tx = 50.0 + qx * th.cos() - qy * th.sin() + dx;
            let ty = 50.0 + qx * th.sin() + qy * th.cos() - dx;
            let eps = 1e-9;
            prop_assert!(hull.x_min() - eps <= tx && tx <= hull.x_max() + eps);
            prop_assert!(hull.y_min() - eps <= ty && ty <= hull.y_max() + eps);
        }
    }
}
