//! COCO-layout ground truth and prediction files, and seeded dataset splits.
//!
//! Boxes are stored on disk as `[x, y, width, height]` and converted to
//! corner form when handed to the evaluator. Records keep their stored form
//! so that a load/save cycle reproduces the file's numbers exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Detection, GroundTruthAnnotation};
use crate::geometry::BBox;

/// Slack allowed when checking that boxes lie inside their image.
const BOUNDS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

impl AnnotationRecord {
    pub fn corner_box(&self) -> Result<BBox> {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<CategoryRecord>,
    #[serde(default)]
    pub annotations: Vec<AnnotationRecord>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, source: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        message: e.to_string(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    parse_manifest(&read_text(path)?, &path.display().to_string())
}

/// Parses and validates a manifest; `source` names the input in errors.
pub fn parse_manifest(text: &str, source: &str) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = parse_json(text, source)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }

    /// Checks id references and box geometry.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = BTreeMap::new();
        for img in &self.images {
            if image_ids.insert(img.id, img).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate image id {}", img.id)));
            }
        }
        let mut category_ids = HashSet::new();
        for c in &self.categories {
            if !category_ids.insert(c.id) {
                return Err(Error::InvalidArgument(format!("duplicate category id {}", c.id)));
            }
        }
        let mut offenders = Vec::new();
        for a in &self.annotations {
            let Some(img) = image_ids.get(&a.image_id) else {
                return Err(Error::DanglingId {
                    kind: "image",
                    id: a.image_id,
                    referrer: format!("annotation {}", a.id),
                });
            };
            if !category_ids.contains(&a.category_id) {
                return Err(Error::DanglingId {
                    kind: "category",
                    id: a.category_id,
                    referrer: format!("annotation {}", a.id),
                });
            }
            match a.corner_box() {
                Ok(b) if !b.has_positive_area() => {
                    offenders.push(format!("annotation {}: zero-area box {:?}", a.id, a.bbox))
                }
                Ok(b) => {
                    let (w, h) = (f64::from(img.width), f64::from(img.height));
                    if b.x_min() < -BOUNDS_TOLERANCE
                        || b.y_min() < -BOUNDS_TOLERANCE
                        || b.x_max() > w + BOUNDS_TOLERANCE
                        || b.y_max() > h + BOUNDS_TOLERANCE
                    {
                        offenders.push(format!(
                            "annotation {}: box {:?} outside {}x{} image {}",
                            a.id, a.bbox, img.width, img.height, img.id
                        ));
                    }
                }
                Err(e) => offenders.push(format!("annotation {}: {e}", a.id)),
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidBoxes(offenders))
        }
    }

    /// Annotations in corner form. Assumes the manifest has been validated.
    pub fn ground_truths(&self) -> Result<Vec<GroundTruthAnnotation>> {
        self.annotations
            .iter()
            .map(|a| {
                Ok(GroundTruthAnnotation {
                    image_id: a.image_id,
                    class_id: a.category_id,
                    bbox: a.corner_box()?,
                })
            })
            .collect()
    }

    pub fn category_names(&self) -> BTreeMap<u64, String> {
        self.categories.iter().map(|c| (c.id, c.name.clone())).collect()
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }
}

/// One entry of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_predictions(&read_text(path)?, &path.display().to_string())
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<Detection>> {
    let records: Vec<PredictionRecord> = parse_json(text, source)?;
    let mut offenders = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let [x, y, w, h] = r.bbox;
        match BBox::from_xywh(x, y, w, h) {
            Ok(_) if !(0.0..=1.0).contains(&r.score) => {
                offenders.push(format!("prediction {i}: score {} outside [0, 1]", r.score))
            }
            Ok(bbox) => out.push(Detection {
                image_id: r.image_id,
                class_id: r.category_id,
                bbox,
                score: r.score,
            }),
            Err(e) => offenders.push(format!("prediction {i}: {e}")),
        }
    }
    if offenders.is_empty() {
        Ok(out)
    } else {
        Err(Error::InvalidBoxes(offenders))
    }
}

/// Fails on the first prediction whose image or category is not in `manifest`.
pub fn check_prediction_ids(dets: &[Detection], manifest: &DatasetManifest) -> Result<()> {
    let images: HashSet<u64> = manifest.images.iter().map(|i| i.id).collect();
    let categories: HashSet<u64> = manifest.categories.iter().map(|c| c.id).collect();
    for (i, d) in dets.iter().enumerate() {
        if !images.contains(&d.image_id) {
            return Err(Error::DanglingId {
                kind: "image",
                id: d.image_id,
                referrer: format!("prediction {i}"),
            });
        }
        if !categories.contains(&d.class_id) {
            return Err(Error::DanglingId {
                kind: "category",
                id: d.class_id,
                referrer: format!("prediction {i}"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if !f.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidArgument(format!("split fractions must be non-negative, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub fn split_dataset(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetSplit> {
    split_ids(&manifest.image_ids(), spec)
}

/// Seeded shuffle, then `round(n * frac)` ids each for validation and test;
/// train takes the rest. The result does not depend on the input order.
pub fn split_ids(ids: &[u64], spec: &SplitSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let val = ((n as f64 * spec.val_frac).round() as usize).min(n);
    let test = ((n as f64 * spec.test_frac).round() as usize).min(n - val);
    let train = n - val - test;
    Ok(DatasetSplit {
        train: ids[..train].to_vec(),
        val: ids[train..train + val].to_vec(),
        test: ids[train + val..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MANIFEST: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],
        "categories": [{"id": 3, "name": "AK47"}],
        "annotations": [{"id": 10, "image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40]}]
    }"#;

    #[test]
    fn converts_xywh_to_corners() {
        let m = parse_manifest(MANIFEST, "inline").unwrap();
        let gts = m.ground_truths().unwrap();
        assert_eq!(gts[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert_eq!(gts[0].class_id, 3);
        assert_eq!(m.category_names()[&3], "AK47");
    }

    #[test]
    fn empty_annotation_list_is_valid() {
        let m = parse_manifest(r#"{"images": [], "categories": [], "annotations": []}"#, "x").unwrap();
        assert!(m.annotations.is_empty());
        let m = parse_manifest(r#"{"images": [], "categories": []}"#, "x").unwrap();
        assert!(m.annotations.is_empty());
    }

    #[test]
    fn dangling_ids_are_rejected() {
        let bad = MANIFEST.replace("\"image_id\": 1", "\"image_id\": 2");
        assert!(matches!(parse_manifest(&bad, "x"), Err(Error::DanglingId { kind: "image", id: 2, .. })));
        let bad = MANIFEST.replace("\"category_id\": 3", "\"category_id\": 4");
        assert!(matches!(parse_manifest(&bad, "x"), Err(Error::DanglingId { kind: "category", .. })));
    }

    #[test]
    fn invalid_boxes_are_listed() {
        let bad = MANIFEST.replace("[10, 20, 30, 40]", "[90, 20, 30, 40]");
        match parse_manifest(&bad, "x") {
            Err(Error::InvalidBoxes(list)) => assert!(list[0].contains("annotation 10")),
            other => panic!("{other:?}"),
        }
        let bad = MANIFEST.replace("[10, 20, 30, 40]", "[10, 20, -3, 40]");
        assert!(matches!(parse_manifest(&bad, "x"), Err(Error::InvalidBoxes(_))));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_manifest("{\"images\": [}", "broken.json").unwrap_err();
        assert!(err.is_io_or_parse());
        let msg = err.to_string();
        assert!(msg.contains("broken.json") && msg.contains("line 1"), "{msg}");
        let err = parse_manifest(r#"{"images": [{"id": 1}], "categories": []}"#, "f").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn predictions_parse_and_validate() {
        let dets = parse_predictions(
            r#"[{"image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40], "score": 0.5}]"#,
            "p",
        )
        .unwrap();
        assert_eq!(dets[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0).unwrap());
        assert!(parse_predictions(r#"[{"image_id": 1, "category_id": 3, "bbox": [0,0,1,1], "score": 1.5}]"#, "p").is_err());

        let m = parse_manifest(MANIFEST, "m").unwrap();
        assert!(check_prediction_ids(&dets, &m).is_ok());
        let stray = [Detection { image_id: 9, ..dets[0] }];
        assert!(matches!(check_prediction_ids(&stray, &m), Err(Error::DanglingId { .. })));
    }

    #[test]
    fn split_examples() {
        let ids: Vec<u64> = (0..3319).collect();
        let spec = SplitSpec { train_frac: 0.5335, val_frac: 0.2178, test_frac: 0.2487, seed: 0 };
        let s = split_ids(&ids, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1771, 723, 825));
        assert_eq!(s, split_ids(&ids, &spec).unwrap());

        let all_train = SplitSpec { train_frac: 1.0, val_frac: 0.0, test_frac: 0.0, seed: 5 };
        let s = split_ids(&ids, &all_train).unwrap();
        assert_eq!(s.train.len(), 3319);
        assert!(s.val.is_empty() && s.test.is_empty());

        assert!(split_ids(&ids, &SplitSpec { train_frac: 0.5, val_frac: 0.2, test_frac: 0.2, seed: 0 }).is_err());
        assert!(split_ids(&ids, &SplitSpec { train_frac: 1.2, val_frac: -0.2, test_frac: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn save_then_load_reproduces_manifest() {
        let m = parse_manifest(MANIFEST, "m").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
        assert!(matches!(load_manifest(dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        let boxes = prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 0.01..50.0f64, 0.01..50.0f64, 0..3u64, 0..4u64),
            0..30,
        );
        boxes.prop_map(|raw| DatasetManifest {
            images: (0..3)
                .map(|id| ImageRecord { id, width: 100, height: 100, file_name: format!("{id}.png") })
                .collect(),
            categories: (0..4).map(|id| CategoryRecord { id, name: format!("c{id}") }).collect(),
            annotations: raw
                .into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, image_id, category_id))| AnnotationRecord {
                    id: i as u64,
                    image_id,
                    category_id,
                    bbox: [x, y, w, h],
                    area: None,
                    iscrowd: None,
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn manifest_json_round_trip(m in arb_manifest()) {
            let again = parse_manifest(&m.to_json(), "rt").unwrap();
            prop_assert_eq!(&again, &m);
            prop_assert_eq!(again.ground_truths().unwrap(), m.ground_truths().unwrap());
        }

        #[test]
        fn split_partitions(n in 0usize..400, seed in any::<u64>(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let spec = SplitSpec { train_frac: lo, val_frac: hi - lo, test_frac: 1.0 - hi, seed };
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 1).collect();
            let s = split_ids(&ids, &spec).unwrap();
            let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids.clone());
            let mut reversed = ids.clone();
            reversed.reverse();
            prop_assert_eq!(split_ids(&reversed, &spec).unwrap(), s);
        }
    }
}
