//! Report generation: the `evaluate` pipeline from files to tables, and the
//! arithmetic derived from per-model metric summaries (F1, FPS, percentage
//! change against a baseline model).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{Error, Result};
use crate::evaluation::{self, ClassEval, EvalConfig, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown output format `{other}`"))),
        }
    }
}

/// `1000 / latency_ms`, rounded to one decimal.
pub fn fps_from_latency(latency_ms: f64) -> f64 {
    (10_000.0 / latency_ms).round() / 10.0
}

/// `100 * (value - baseline) / baseline`.
pub fn percent_change(baseline: f64, value: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

/// One model's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReportRow {
    pub model: String,
    pub map_all: f64,
    pub map_50: f64,
    pub average_recall: f64,
    pub f1: f64,
    pub latency_ms: f64,
    pub fps: f64,
}

impl ModelReportRow {
    /// Fills in F1 (harmonic mean of mAP and AR) and FPS.
    pub fn new(model: impl Into<String>, map_all: f64, map_50: f64, average_recall: f64, latency_ms: f64) -> Self {
        Self {
            model: model.into(),
            map_all,
            map_50,
            average_recall,
            f1: evaluation::f1(map_all, average_recall),
            latency_ms,
            fps: fps_from_latency(latency_ms),
        }
    }
}

/// Input of the `report` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub models: Vec<ModelMetrics>,
    #[serde(default)]
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub map_all: f64,
    pub map_50: f64,
    pub average_recall: f64,
    pub latency_ms: f64,
}

/// Per-class AP values keyed by model name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    #[serde(default)]
    pub ap_all: BTreeMap<String, f64>,
    #[serde(default)]
    pub ap_50: BTreeMap<String, f64>,
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<MetricsFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChange {
    pub model: String,
    pub map_all_pct: f64,
    pub map_50_pct: f64,
    pub average_recall_pct: f64,
    pub fps_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassChange {
    pub class: String,
    pub model: String,
    pub ap_all_pct: Option<f64>,
    pub ap_50_pct: Option<f64>,
}

/// Unweighted mean of a model's per-class column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMean {
    pub model: String,
    pub classes: usize,
    pub ap_all_mean: f64,
    pub ap_50_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedReport {
    pub baseline: String,
    pub rows: Vec<ModelReportRow>,
    pub model_changes: Vec<ModelChange>,
    pub class_changes: Vec<ClassChange>,
    pub column_means: Vec<ColumnMean>,
}

pub fn derive_report_stats(metrics: &MetricsFile, baseline: &str) -> Result<DerivedReport> {
    let rows: Vec<ModelReportRow> = metrics
        .models
        .iter()
        .map(|m| ModelReportRow::new(&m.name, m.map_all, m.map_50, m.average_recall, m.latency_ms))
        .collect();
    let base = rows
        .iter()
        .find(|r| r.model == baseline)
        .ok_or_else(|| Error::UnknownBaseline(baseline.to_string()))?
        .clone();

    let model_changes = rows
        .iter()
        .map(|r| ModelChange {
            model: r.model.clone(),
            map_all_pct: percent_change(base.map_all, r.map_all),
            map_50_pct: percent_change(base.map_50, r.map_50),
            average_recall_pct: percent_change(base.average_recall, r.average_recall),
            fps_pct: percent_change(base.fps, r.fps),
        })
        .collect();

    let mut class_changes = Vec::new();
    for c in &metrics.per_class {
        for r in &rows {
            let change = |col: &BTreeMap<String, f64>| match (col.get(baseline), col.get(&r.model)) {
                (Some(&b), Some(&v)) => Some(percent_change(b, v)),
                _ => None,
            };
            class_changes.push(ClassChange {
                class: c.class.clone(),
                model: r.model.clone(),
                ap_all_pct: change(&c.ap_all),
                ap_50_pct: change(&c.ap_50),
            });
        }
    }

    let mut column_means = Vec::new();
    if !metrics.per_class.is_empty() {
        for r in &rows {
            let summaries: Vec<ClassEval> = metrics
                .per_class
                .iter()
                .enumerate()
                .filter_map(|(i, c)| {
                    Some(ClassEval::from_summary(i as u64, *c.ap_all.get(&r.model)?, *c.ap_50.get(&r.model)?))
                })
                .collect();
            if summaries.is_empty() {
                continue;
            }
            let classes = summaries.len();
            let agg = evaluation::aggregate(summaries, &EvalConfig::default())?;
            column_means.push(ColumnMean {
                model: r.model.clone(),
                classes,
                ap_all_mean: agg.map_all,
                ap_50_mean: agg.map_50,
            });
        }
    }

    Ok(DerivedReport {
        baseline: baseline.to_string(),
        rows,
        model_changes,
        class_changes,
        column_means,
    })
}

/// Result of evaluating a prediction file against a ground-truth manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub class_names: BTreeMap<u64, String>,
}

pub fn evaluate_command(gt_path: impl AsRef<Path>, pred_path: impl AsRef<Path>, cfg: &EvalConfig) -> Result<Evaluation> {
    let manifest = dataset::load_manifest(gt_path)?;
    let dets = dataset::load_predictions(pred_path)?;
    dataset::check_prediction_ids(&dets, &manifest)?;
    let report = evaluation::evaluate(&dets, &manifest.ground_truths()?, cfg)?;
    Ok(Evaluation {
        report,
        class_names: manifest.category_names(),
    })
}

#[derive(Serialize)]
struct ClassRow<'a> {
    class_id: u64,
    class: &'a str,
    ap_all: f64,
    ap_50: f64,
    recall: Option<f64>,
}

#[derive(Serialize)]
struct EvaluationJson<'a> {
    iou_thresholds: &'a [f64],
    per_class: Vec<ClassJson<'a>>,
    map_all: f64,
    map_50: f64,
    average_recall: Option<f64>,
    f1: Option<f64>,
}

#[derive(Serialize)]
struct ClassJson<'a> {
    class_id: u64,
    class: &'a str,
    ap_per_threshold: &'a [f64],
    ap_all: f64,
    ap_50: f64,
    recall: Option<f64>,
}

impl Evaluation {
    fn name(&self, id: u64) -> &str {
        self.class_names.get(&id).map_or("?", String::as_str)
    }

    /// Full-precision JSON.
    pub fn to_json(&self) -> String {
        let r = &self.report;
        let doc = EvaluationJson {
            iou_thresholds: &r.iou_thresholds,
            per_class: r
                .per_class
                .iter()
                .map(|c| ClassJson {
                    class_id: c.class_id,
                    class: self.name(c.class_id),
                    ap_per_threshold: &c.ap_per_threshold,
                    ap_all: c.ap_all,
                    ap_50: c.ap_50,
                    recall: c.recall,
                })
                .collect(),
            map_all: r.map_all,
            map_50: r.map_50,
            average_recall: r.average_recall,
            f1: r.f1,
        };
        serde_json::to_string_pretty(&doc).expect("report serialization cannot fail")
    }

    /// Per-class rows followed by an `all` summary row, full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.report.per_class {
            w.serialize(ClassRow {
                class_id: c.class_id,
                class: self.name(c.class_id),
                ap_all: c.ap_all,
                ap_50: c.ap_50,
                recall: c.recall,
            })?;
        }
        w.write_record([
            String::new(),
            "all".to_string(),
            self.report.map_all.to_string(),
            self.report.map_50.to_string(),
            self.report.average_recall.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?)
            .expect("csv output is UTF-8"))
    }

    /// Per-class table then a one-row summary, metrics to 4 decimals.
    pub fn to_table(&self) -> String {
        let r = &self.report;
        let width = r
            .per_class
            .iter()
            .map(|c| self.name(c.class_id).len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>9}", "Class", "mAP@[.50:.95]", "mAP@.50");
        for c in &r.per_class {
            let _ = writeln!(out, "{:<width$}  {:>14.4}  {:>9.4}", self.name(c.class_id), c.ap_all, c.ap_50);
        }
        out.push('\n');
        let _ = writeln!(out, "{:>14}  {:>9}  {:>14}  {:>6}", "mAP@[.50:.95]", "mAP@.50", "Average Recall", "F1");
        let _ = writeln!(
            out,
            "{:>14.4}  {:>9.4}  {:>14}  {:>6}",
            r.map_all,
            r.map_50,
            fmt_opt(r.average_recall),
            fmt_opt(r.f1)
        );
        out
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Table => Ok(self.to_table()),
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => Ok(self.to_json()),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:+.2}%"))
}

impl DerivedReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(
            out,
            "{:<w$}  {:>14}  {:>9}  {:>14}  {:>6}  {:>12}  {:>5}  {:>10}",
            "Model", "mAP@[.50:.95]", "mAP@.50", "Average Recall", "F1", "Latency (ms)", "FPS", "d mAP"
        );
        for (r, c) in self.rows.iter().zip(&self.model_changes) {
            let _ = writeln!(
                out,
                "{:<w$}  {:>14.4}  {:>9.4}  {:>14.4}  {:>6.4}  {:>12.1}  {:>5.1}  {:>10}",
                r.model,
                r.map_all,
                r.map_50,
                r.average_recall,
                r.f1,
                r.latency_ms,
                r.fps,
                fmt_pct(Some(c.map_all_pct))
            );
        }
        if !self.column_means.is_empty() {
            out.push_str("\nPer-class column means\n");
            for m in &self.column_means {
                let _ = writeln!(
                    out,
                    "{:<w$}  {:>14.4}  {:>9.4}  ({} classes)",
                    m.model, m.ap_all_mean, m.ap_50_mean, m.classes
                );
            }
        }
        if !self.class_changes.is_empty() {
            let cw = self.class_changes.iter().map(|c| c.class.len()).max().unwrap_or(0).max(5);
            let _ = writeln!(out, "\nChange vs {} per class", self.baseline);
            let _ = writeln!(out, "{:<cw$}  {:<w$}  {:>14}  {:>9}", "Class", "Model", "mAP@[.50:.95]", "mAP@.50");
            for c in self.class_changes.iter().filter(|c| c.model != self.baseline) {
                let _ = writeln!(
                    out,
                    "{:<cw$}  {:<w$}  {:>14}  {:>9}",
                    c.class,
                    c.model,
                    fmt_pct(c.ap_all_pct),
                    fmt_pct(c.ap_50_pct)
                );
            }
        }
        out
    }

    /// One row per model with derived columns, full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "map_all", "map_50", "average_recall", "f1", "latency_ms", "fps",
            "map_all_pct", "map_50_pct", "average_recall_pct",
        ])?;
        for (r, c) in self.rows.iter().zip(&self.model_changes) {
            let numbers = [
                r.map_all, r.map_50, r.average_recall, r.f1, r.latency_ms, r.fps,
                c.map_all_pct, c.map_50_pct, c.average_recall_pct,
            ];
            w.write_record(std::iter::once(r.model.clone()).chain(numbers.iter().map(f64::to_string)))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?)
            .expect("csv output is UTF-8"))
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Table => Ok(self.to_table()),
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => Ok(serde_json::to_string_pretty(self).expect("report serialization cannot fail")),
        }
    }
}
