//! Detection geometry toolkit.
//!
//! Axis-aligned box primitives, the L1 / IoU / GIoU / DIoU / CIoU regression
//! losses with analytic gradients, region-proposal machinery (anchors, delta
//! coding, NMS, assignment), box-level augmentation geometry, COCO-style
//! evaluation, a gradient-descent lab for comparing losses, and the
//! dataset/report plumbing used by the `detkit` command-line tool.

pub mod augmentation;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod proposals;
pub mod regression_lab;
pub mod report;

pub use error::{Error, Result};
pub use evaluation::{Detection, EvalConfig, EvalReport, GroundTruthAnnotation};
pub use geometry::{BBox, GeometryScalars};
pub use losses::{LossKind, LossResult};
