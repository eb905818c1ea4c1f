//! Plain gradient descent of a predicted box toward a target under each
//! regression loss, for comparing how the losses behave from a shared set of
//! starting points.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::losses::{self, LossKind};

/// Maximum number of step halvings tried by backtracking.
pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Step directly on `(x_min, y_min, x_max, y_max)`.
    #[default]
    Corners,
    /// Step on `(cx, cy, w, h)`.
    CenterSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub success_iou: f64,
    pub parameterization: Parameterization,
    /// Halve the step (up to [`MAX_HALVINGS`] times) until the loss does not increase.
    pub backtracking: bool,
}

impl DescentConfig {
    pub fn new(loss_kind: LossKind) -> Self {
        Self {
            loss_kind,
            learning_rate: 0.1,
            max_iters: 10_000,
            success_iou: 0.9,
            parameterization: Parameterization::Corners,
            backtracking: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.success_iou > 0.0 && self.success_iou <= 1.0) {
            return Err(Error::InvalidArgument("success IoU must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub bbox: BBox,
    pub loss: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<Iterate>,
    /// Index of the first iterate with IoU >= the success threshold.
    pub converged_at: Option<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &Iterate {
        self.iterates.last().expect("a trajectory always holds the initial iterate")
    }
}

/// Runs descent from `init` toward `target`.
///
/// Iterate 0 is `init`. Stops at the first iterate reaching
/// `cfg.success_iou` or after `cfg.max_iters` steps. If a step would swap a
/// box's corners the coordinates are reordered rather than clamped.
pub fn run_descent(init: &BBox, target: &BBox, cfg: &DescentConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if !target.has_positive_area() {
        return Err(Error::InvalidArgument("target box needs positive area".into()));
    }
    let mut pred = *init;
    let mut iterates = Vec::new();
    let mut converged_at = None;
    let mut current = losses::loss(cfg.loss_kind, target, &pred)?;
    for it in 0..=cfg.max_iters {
        iterates.push(Iterate {
            bbox: pred,
            loss: current.value,
            gradient_norm: current.gradient_norm(),
        });
        if geometry::iou(&pred, target)? >= cfg.success_iou {
            converged_at = Some(it);
            break;
        }
        if it == cfg.max_iters {
            break;
        }
        let mut lr = cfg.learning_rate;
        let mut next = step(&pred, &current.gradient, lr, cfg.parameterization)?;
        let mut next_loss = losses::loss(cfg.loss_kind, target, &next)?;
        if cfg.backtracking {
            let mut halvings = 0;
            while next_loss.value > current.value && halvings < MAX_HALVINGS {
                lr /= 2.0;
                halvings += 1;
                next = step(&pred, &current.gradient, lr, cfg.parameterization)?;
                next_loss = losses::loss(cfg.loss_kind, target, &next)?;
            }
            if next_loss.value > current.value {
                // no descent direction at any tried step size
                next = pred;
                next_loss = current;
            }
        }
        pred = next;
        current = next_loss;
    }
    Ok(Trajectory {
        iterates,
        converged_at,
    })
}

fn step(b: &BBox, grad: &[f64; 4], lr: f64, param: Parameterization) -> Result<BBox> {
    match param {
        Parameterization::Corners => {
            let p = b.to_array();
            BBox::from_unordered(
                p[0] - lr * grad[0],
                p[1] - lr * grad[1],
                p[2] - lr * grad[2],
                p[3] - lr * grad[3],
            )
        }
        Parameterization::CenterSize => {
            // x_min = cx - w/2, x_max = cx + w/2
            let (cx, cy) = b.center();
            let g_cx = grad[0] + grad[2];
            let g_cy = grad[1] + grad[3];
            let g_w = (grad[2] - grad[0]) / 2.0;
            let g_h = (grad[3] - grad[1]) / 2.0;
            BBox::from_center(
                cx - lr * g_cx,
                cy - lr * g_cy,
                (b.width() - lr * g_w).abs(),
                (b.height() - lr * g_h).abs(),
            )
        }
    }
}

/// How the shared suite of `(init, target)` pairs is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteSampler {
    pub seed: u64,
    /// Boxes are placed inside `[0, canvas]^2`.
    pub canvas: f64,
    pub min_side: f64,
    pub max_side: f64,
    /// Reject pairs that overlap.
    pub disjoint: bool,
}

impl Default for SuiteSampler {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas: 20.0,
            min_side: 1.0,
            max_side: 5.0,
            disjoint: true,
        }
    }
}

impl SuiteSampler {
    /// `(init, target)` pairs; the same seed always yields the same suite.
    pub fn sample(&self, trials: usize) -> Result<Vec<(BBox, BBox)>> {
        if !(self.min_side > 0.0 && self.max_side >= self.min_side && self.canvas > self.max_side * 2.0) {
            return Err(Error::InvalidArgument(
                "sampler needs 0 < min_side <= max_side and canvas > 2 * max_side".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let draw = |rng: &mut ChaCha8Rng| -> Result<BBox> {
            let w = rng.random_range(self.min_side..=self.max_side);
            let h = rng.random_range(self.min_side..=self.max_side);
            let x = rng.random_range(0.0..=self.canvas - w);
            let y = rng.random_range(0.0..=self.canvas - h);
            BBox::from_xywh(x, y, w, h)
        };
        let mut pairs = Vec::with_capacity(trials);
        while pairs.len() < trials {
            let init = draw(&mut rng)?;
            let target = draw(&mut rng)?;
            if self.disjoint && geometry::intersection_area(&init, &target) > 0.0 {
                continue;
            }
            pairs.push((init, target));
        }
        Ok(pairs)
    }
}

/// Outcome of one descent, as written to the per-trial CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub loss: LossKind,
    pub converged: bool,
    /// Steps to success, or the iteration budget when it never converged.
    pub iterations: usize,
    pub final_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: LossKind,
    pub trials: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Median steps to success with failures counted as never converging;
    /// `None` when at least half the trials failed.
    pub median_iterations: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<LossSummary>,
}

pub const MIN_STUDY_TRIALS: usize = 30;

/// Runs every loss in `loss_kinds` on the same sampled suite.
///
/// `template` supplies everything but the loss kind.
pub fn convergence_study(
    trials: usize,
    loss_kinds: &[LossKind],
    sampler: &SuiteSampler,
    template: &DescentConfig,
) -> Result<ConvergenceStudy> {
    if trials < MIN_STUDY_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "a convergence study needs at least {MIN_STUDY_TRIALS} trials, got {trials}"
        )));
    }
    template.validate()?;
    let suite = sampler.sample(trials)?;
    let jobs: Vec<(LossKind, usize)> = loss_kinds
        .iter()
        .flat_map(|&k| (0..trials).map(move |t| (k, t)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(loss_kind, trial)| {
            let (init, target) = &suite[trial];
            let cfg = DescentConfig { loss_kind, ..*template };
            let traj = run_descent(init, target, &cfg)?;
            Ok(TrialRecord {
                trial,
                loss: loss_kind,
                converged: traj.converged_at.is_some(),
                iterations: traj.converged_at.unwrap_or(cfg.max_iters),
                final_iou: geometry::iou(&traj.last().bbox, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = loss_kinds
        .iter()
        .map(|&loss| {
            let mut steps: Vec<Option<usize>> = records
                .iter()
                .filter(|r| r.loss == loss)
                .map(|r| r.converged.then_some(r.iterations))
                .collect();
            // None sorts first; put failures last
            steps.sort_by_key(|s| s.map_or(usize::MAX, |v| v));
            let converged = steps.iter().flatten().count();
            LossSummary {
                loss,
                trials,
                converged,
                convergence_rate: converged as f64 / trials as f64,
                median_iterations: median(&steps),
            }
        })
        .collect();
    Ok(ConvergenceStudy { records, summary })
}

fn median(sorted: &[Option<usize>]) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    if n % 2 == 1 {
        sorted[n / 2].map(|v| v as f64)
    } else {
        Some((sorted[n / 2 - 1]? as f64 + sorted[n / 2]? as f64) / 2.0)
    }
}

impl ConvergenceStudy {
    pub fn summary_for(&self, loss: LossKind) -> Option<&LossSummary> {
        self.summary.iter().find(|s| s.loss == loss)
    }

    /// `trial,loss,converged,iterations,final_iou` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for r in &self.records {
            writer.serialize(r)?;
        }
        writer.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}
