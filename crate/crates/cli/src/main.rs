use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detkit::augmentation::{sample_plan, AugmentParams};
use detkit::dataset::{self, DatasetManifest, SplitSpec};
use detkit::evaluation::{coco_iou_thresholds, AbsentClassPolicy, EvalConfig};
use detkit::losses::LossKind;
use detkit::proposals::{generate_anchors, Anchor, AnchorConfig};
use detkit::regression_lab::{convergence_study, DescentConfig, LossSummary, Parameterization, SuiteSampler};
use detkit::report::{self, OutputFormat};
use detkit::{Error, Result};

/// Detection geometry and COCO-style evaluation tools.
#[derive(Parser, Debug)]
#[command(name = "detkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score predictions against a COCO-layout ground-truth file
    Evaluate(EvaluateArgs),
    /// Split a dataset's images into train/val/test by seed
    Split(SplitArgs),
    /// Compare how regression losses converge from shared random starts
    Convergence(ConvergenceArgs),
    /// Dump the anchors generated for an image size
    Anchors(AnchorsArgs),
    /// Sample a per-image augmentation plan as CSV
    AugmentPlan(AugmentPlanArgs),
    /// Derived statistics (F1, FPS, changes vs a baseline) from a metrics file
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Ground truth in COCO layout
    #[arg(long)]
    gt: PathBuf,
    /// Predictions: JSON list of {image_id, category_id, bbox: [x, y, w, h], score}
    #[arg(long)]
    pred: PathBuf,
    /// Comma-separated IoU thresholds [default: 0.50,0.55,...,0.95]
    #[arg(long, value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,
    /// Maximum detections kept per image and class
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
    /// Classes with detections but no ground truth: skip or zero
    #[arg(long, default_value = "skip", value_parser = parse_absent)]
    absent_classes: AbsentClassPolicy,
    #[arg(long, default_value = "table")]
    format: OutputFormat,
    /// Also write full-precision JSON here
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Dataset manifest in COCO layout
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train: f64,
    #[arg(long, default_value_t = 0.15)]
    val: f64,
    #[arg(long, default_value_t = 0.15)]
    test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "table")]
    format: OutputFormat,
    /// Write train.json, val.json and test.json manifests into this directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Comma-separated losses among l1, iou, giou, diou, ciou
    #[arg(long, value_delimiter = ',', default_value = "l1,iou,giou,diou,ciou")]
    losses: Vec<LossKind>,
    #[arg(long, default_value_t = 2.0)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.9)]
    success_iou: f64,
    /// Step on corners or on center and size
    #[arg(long, default_value = "corners", value_parser = parse_parameterization)]
    parameterization: Parameterization,
    /// Halve rejected steps until the loss stops increasing
    #[arg(long)]
    backtracking: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square canvas boxes are drawn in
    #[arg(long, default_value_t = 20.0)]
    canvas: f64,
    #[arg(long, default_value_t = 1.0)]
    min_side: f64,
    #[arg(long, default_value_t = 5.0)]
    max_side: f64,
    /// Allow overlapping starting pairs
    #[arg(long)]
    allow_overlap: bool,
    #[arg(long, default_value = "table")]
    format: OutputFormat,
    /// Write one CSV row per (trial, loss)
    #[arg(long)]
    trials_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnchorsArgs {
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    #[arg(long, default_value_t = 8)]
    scale: u32,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    strides: Vec<u32>,
    /// table prints a per-level summary; csv and json list every anchor
    #[arg(long, default_value = "table")]
    format: OutputFormat,
}

#[derive(Args, Debug)]
struct AugmentPlanArgs {
    #[arg(long)]
    images: usize,
    #[arg(long)]
    width: f64,
    #[arg(long)]
    height: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    ssr_prob: f64,
    #[arg(long, default_value_t = 0.0625)]
    max_shift: f64,
    #[arg(long, default_value_t = 0.1)]
    max_scale: f64,
    #[arg(long, default_value_t = 45.0)]
    max_rotate: f64,
    /// Defaults to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON with `models` and optional `per_class` entries
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    baseline: String,
    #[arg(long, default_value = "table")]
    format: OutputFormat,
}

fn parse_absent(s: &str) -> std::result::Result<AbsentClassPolicy, String> {
    match s.to_ascii_lowercase().as_str() {
        "skip" => Ok(AbsentClassPolicy::Skip),
        "zero" => Ok(AbsentClassPolicy::Zero),
        _ => Err(format!("expected skip or zero, got `{s}`")),
    }
}

fn parse_parameterization(s: &str) -> std::result::Result<Parameterization, String> {
    match s.to_ascii_lowercase().as_str() {
        "corners" => Ok(Parameterization::Corners),
        "center-size" => Ok(Parameterization::CenterSize),
        _ => Err(format!("expected corners or center-size, got `{s}`")),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn print(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = EvalConfig {
        iou_thresholds: args.iou_thresholds.unwrap_or_else(coco_iou_thresholds),
        max_detections_per_image: args.max_dets,
        absent_classes: args.absent_classes,
        ..EvalConfig::default()
    };
    cfg.validate()?;
    let evaluation = report::evaluate_command(&args.gt, &args.pred, &cfg)?;
    if let Some(path) = &args.json_out {
        write_file(path, &evaluation.to_json())?;
    }
    print(&evaluation.render(args.format)?);
    Ok(())
}

fn subset(manifest: &DatasetManifest, ids: &[u64]) -> DatasetManifest {
    let keep: std::collections::BTreeSet<u64> = ids.iter().copied().collect();
    DatasetManifest {
        images: manifest.images.iter().filter(|i| keep.contains(&i.id)).cloned().collect(),
        categories: manifest.categories.clone(),
        annotations: manifest
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.image_id))
            .cloned()
            .collect(),
    }
}

fn split(args: SplitArgs) -> Result<()> {
    let manifest = dataset::load_manifest(&args.manifest)?;
    let spec = SplitSpec {
        train_frac: args.train,
        val_frac: args.val,
        test_frac: args.test,
        seed: args.seed,
    };
    let s = dataset::split_dataset(&manifest, &spec)?;
    let parts = [("train", &s.train), ("val", &s.val), ("test", &s.test)];
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        for (name, ids) in parts {
            dataset::save_manifest(&subset(&manifest, ids), dir.join(format!("{name}.json")))?;
        }
    }
    let text = match args.format {
        OutputFormat::Table => {
            let mut out = format!("{:<6}  {:>7}\n", "split", "images");
            for (name, ids) in parts {
                let _ = writeln!(out, "{name:<6}  {:>7}", ids.len());
            }
            out
        }
        OutputFormat::Csv => {
            let mut out = String::from("split,image_id\n");
            for (name, ids) in parts {
                for id in ids {
                    let _ = writeln!(out, "{name},{id}");
                }
            }
            out
        }
        OutputFormat::Json => serde_json::to_string_pretty(&s).expect("split serialization cannot fail"),
    };
    print(&text);
    Ok(())
}

fn summary_text(summary: &[LossSummary], format: OutputFormat) -> String {
    let median = |m: Option<f64>| m.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
    match format {
        OutputFormat::Table => {
            let mut out = format!(
                "{:<5}  {:>6}  {:>9}  {:>6}  {:>14}\n",
                "loss", "trials", "converged", "rate", "median iters"
            );
            for s in summary {
                let _ = writeln!(
                    out,
                    "{:<5}  {:>6}  {:>9}  {:>6.4}  {:>14}",
                    s.loss.name(),
                    s.trials,
                    s.converged,
                    s.convergence_rate,
                    median(s.median_iterations)
                );
            }
            out
        }
        OutputFormat::Csv => {
            let mut out = String::from("loss,trials,converged,convergence_rate,median_iterations\n");
            for s in summary {
                let m = s.median_iterations.map_or_else(String::new, |v| v.to_string());
                let _ = writeln!(out, "{},{},{},{},{m}", s.loss.name(), s.trials, s.converged, s.convergence_rate);
            }
            out
        }
        OutputFormat::Json => serde_json::to_string_pretty(summary).expect("summary serialization cannot fail"),
    }
}

fn convergence(args: ConvergenceArgs) -> Result<()> {
    let template = DescentConfig {
        learning_rate: args.lr,
        max_iters: args.max_iters,
        success_iou: args.success_iou,
        parameterization: args.parameterization,
        backtracking: args.backtracking,
        ..DescentConfig::new(LossKind::Iou)
    };
    let sampler = SuiteSampler {
        seed: args.seed,
        canvas: args.canvas,
        min_side: args.min_side,
        max_side: args.max_side,
        disjoint: !args.allow_overlap,
    };
    let study = convergence_study(args.trials, &args.losses, &sampler, &template)?;
    if let Some(path) = &args.trials_csv {
        let file = fs::File::create(path).map_err(|source| Error::Io { path: path.clone(), source })?;
        study.write_csv(std::io::BufWriter::new(file))?;
    }
    print(&summary_text(&study.summary, args.format));
    Ok(())
}

fn anchors_text(anchors: &[Anchor], cfg: &AnchorConfig, sizes: &[(usize, usize)], format: OutputFormat) -> Result<String> {
    Ok(match format {
        OutputFormat::Table => {
            let mut out = format!("{:>5}  {:>6}  {:>9}  {:>8}\n", "level", "stride", "grid", "anchors");
            for (level, (&stride, &(rows, cols))) in cfg.strides.iter().zip(sizes).enumerate() {
                let n = anchors.iter().filter(|a| a.level == level).count();
                let _ = writeln!(out, "{level:>5}  {stride:>6}  {:>9}  {n:>8}", format!("{rows}x{cols}"));
            }
            let _ = writeln!(out, "total anchors: {}", anchors.len());
            out
        }
        OutputFormat::Csv => {
            let mut out = String::from("level,row,col,x_min,y_min,x_max,y_max\n");
            for a in anchors {
                let [x0, y0, x1, y1] = a.bbox.to_array();
                let _ = writeln!(out, "{},{},{},{x0},{y0},{x1},{y1}", a.level, a.row, a.col);
            }
            out
        }
        OutputFormat::Json => serde_json::to_string_pretty(anchors).expect("anchor serialization cannot fail"),
    })
}

fn anchors(args: AnchorsArgs) -> Result<()> {
    if args.width == 0 || args.height == 0 {
        return Err(Error::InvalidArgument("image width and height must be positive".into()));
    }
    let cfg = AnchorConfig {
        scale: args.scale,
        aspect_ratios: args.ratios,
        strides: args.strides,
    };
    cfg.validate()?;
    let sizes = cfg.feature_sizes_for_image(args.height, args.width);
    let anchors = generate_anchors(&cfg, &sizes)?;
    print(&anchors_text(&anchors, &cfg, &sizes, args.format)?);
    Ok(())
}

fn augment_plan(args: AugmentPlanArgs) -> Result<()> {
    let params = AugmentParams {
        flip_prob: args.flip_prob,
        shift_scale_rotate_prob: args.ssr_prob,
        max_shift_frac: args.max_shift,
        max_scale_delta: args.max_scale,
        max_rotate_deg: args.max_rotate,
        ..AugmentParams::new(args.width, args.height)
    };
    let plan = sample_plan(&params, args.images, args.seed)?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|source| Error::Io { path: path.clone(), source })?;
            plan.write_csv(std::io::BufWriter::new(file))
        }
        None => plan.write_csv(std::io::stdout().lock()),
    }
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let metrics = report::load_metrics(&args.metrics)?;
    let derived = report::derive_report_stats(&metrics, &args.baseline)?;
    print(&derived.render(args.format)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Split(a) => split(a),
        Command::Convergence(a) => convergence(a),
        Command::Anchors(a) => anchors(a),
        Command::AugmentPlan(a) => augment_plan(a),
        Command::Report(a) => report_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // 1 for inputs that parsed but are invalid, 2 for unreadable or malformed inputs
            ExitCode::from(if e.is_io_or_parse() { 2 } else { 1 })
        }
    }
}
