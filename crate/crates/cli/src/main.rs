//! `gcdlab`: command-line front end for the gcd-core experiments.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 data error,
//! 3 verification failure (`gradcheck`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcd_core::data::{self, SizeRange, Table};
use gcd_core::grad::{self, GradDiff};
use gcd_core::metrics::{self, MetricConfig, MetricKind};
use gcd_core::simlab::{self, AssignConfig, AssignResult, AssignSummary, GcdLoss, Parametrization, RegressionConfig};
use gcd_core::{svg, BBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gcdlab", version, about = "Gaussian Combined Distance experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two boxes under one metric and print JSON.
    Metric(MetricCmd),
    /// Similarity vs. center offset for several box sizes.
    Sweep(SweepCmd),
    /// Gradient-descent regression of one box onto another.
    Regress(RegressCmd),
    /// Anchor label assignment on a COCO file or a synthetic scene.
    Assign(AssignCmd),
    /// Object size statistics of a COCO file.
    Stats(StatsCmd),
    /// Check analytic GCD gradients against finite differences.
    Gradcheck(GradcheckCmd),
}

#[derive(Args)]
struct MetricOpts {
    /// Metric: gcd, wd, nwd, kld, iou, giou, diou.
    #[arg(long, default_value = "gcd", value_parser = parse_kind)]
    metric: MetricKind,
    /// NWD normalizer C in pixels.
    #[arg(long, default_value_t = metrics::DEFAULT_NWD_C)]
    nwd_c: f64,
    /// Numerical floor used by loss gradients.
    #[arg(long, default_value_t = metrics::DEFAULT_EPS)]
    eps: f64,
}

impl MetricOpts {
    fn config(&self) -> Result<MetricConfig, CliError> {
        MetricConfig::new(self.nwd_c, self.eps).map_err(CliError::from)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
    Svg,
}

#[derive(Args)]
struct OutputOpts {
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricCmd {
    /// Predicted box as cx,cy,w,h.
    #[arg(long, value_parser = parse_box)]
    pred: BBox,
    /// Ground-truth box as cx,cy,w,h.
    #[arg(long, value_parser = parse_box)]
    gt: BBox,
    #[command(flatten)]
    metric: MetricOpts,
}

#[derive(Args)]
struct SweepCmd {
    /// Box side lengths in pixels.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
    sizes: Vec<f64>,
    /// Horizontal center offsets in pixels.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2,2.5,3,3.5,4")]
    offsets: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "iou,gcd,nwd,wd")]
    metrics: Vec<MetricKind>,
    #[arg(long, default_value_t = metrics::DEFAULT_NWD_C)]
    nwd_c: f64,
    #[command(flatten)]
    output: OutputOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Direct,
    LogSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum GcdLossArg {
    SquaredDistance,
    OneMinusSimilarity,
}

#[derive(Args)]
struct RegressCmd {
    /// JSON file holding a full regression config; other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_box, required_unless_present = "config")]
    init: Option<BBox>,
    #[arg(long, value_parser = parse_box, required_unless_present = "config")]
    target: Option<BBox>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = ParamArg::LogSize)]
    param: ParamArg,
    /// Loss form used when --metric is gcd.
    #[arg(long, value_enum, default_value_t = GcdLossArg::SquaredDistance)]
    gcd_loss: GcdLossArg,
    #[command(flatten)]
    metric: MetricOpts,
    #[command(flatten)]
    output: OutputOpts,
}

#[derive(Args)]
struct AssignCmd {
    /// COCO annotation file; a seeded synthetic scene is used when omitted.
    #[arg(long)]
    coco: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic scene: number of images.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Synthetic scene: GTs per image.
    #[arg(long, default_value_t = 20)]
    gts_per_image: usize,
    /// Synthetic scene: square image side in pixels.
    #[arg(long, default_value_t = 128.0)]
    img_size: f64,
    /// Synthetic scene: smallest GT side in pixels.
    #[arg(long, default_value_t = 2.0)]
    gt_min: f64,
    /// Synthetic scene: largest GT side in pixels.
    #[arg(long, default_value_t = 32.0)]
    gt_max: f64,
    #[arg(long, default_value_t = 8.0)]
    stride: f64,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    scales: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0.7)]
    pos: f64,
    #[arg(long, default_value_t = 0.3)]
    neg: f64,
    /// Do not let each GT claim its best anchor.
    #[arg(long)]
    no_low_quality: bool,
    #[arg(long, value_delimiter = ',', value_parser = parse_range, default_value = "2-8,8-16,16-32")]
    buckets: Vec<SizeRange>,
    #[command(flatten)]
    metric: MetricOpts,
    #[command(flatten)]
    output: OutputOpts,
}

#[derive(Args)]
struct StatsCmd {
    #[arg(long)]
    coco: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_range, default_value = "2-8,8-16,16-32")]
    buckets: Vec<SizeRange>,
    #[command(flatten)]
    output: OutputOpts,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = grad::DEFAULT_FD_STEP)]
    step: f64,
    /// Coordinate-wise relative tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Absolute differences below this always pass.
    #[arg(long, default_value_t = 1e-8)]
    abs_floor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Verify(String),
}

impl From<gcd_core::Error> for CliError {
    fn from(e: gcd_core::Error) -> Self {
        match e {
            gcd_core::Error::Config(_)
            | gcd_core::Error::InvalidBox { .. }
            | gcd_core::Error::NonFiniteCoordinate { .. }
            | gcd_core::Error::InvalidTransform { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn parse_kind(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: gcd_core::Error| e.to_string())
}

fn parse_range(s: &str) -> Result<SizeRange, String> {
    s.parse().map_err(|e: gcd_core::Error| e.to_string())
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected cx,cy,w,h, got {s:?}"));
    }
    let mut v = [0.0; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("{part:?} is not a number"))?;
    }
    BBox::from_array(v).map_err(|e| e.to_string())
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Data(format!("stdout: {e}"))),
    }
}

fn emit_table<T: Table>(table: &T, output: &OutputOpts, chart: Option<svg::LineChart>) -> Result<(), CliError> {
    let bytes = match output.format {
        OutFormat::Csv => data::render_table(table, data::Format::Csv)?,
        OutFormat::Json => data::render_table(table, data::Format::Json)?,
        OutFormat::Svg => match chart {
            Some(c) => c.render().into_bytes(),
            None => return Err(CliError::Usage("svg output is only available for sweep and regress".into())),
        },
    };
    emit(&bytes, output.out.as_deref())
}

#[derive(Serialize)]
struct MetricReport {
    metric: MetricKind,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance: Option<f64>,
}

fn cmd_metric(c: &MetricCmd) -> Result<(), CliError> {
    let cfg = c.metric.config()?;
    let kind = c.metric.metric;
    let report = MetricReport {
        metric: kind,
        value: metrics::metric_eval(kind, &c.pred, &c.gt, &cfg),
        distance: metrics::distance(kind, &c.pred, &c.gt),
    };
    let mut bytes = serde_json::to_vec(&report).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    emit(&bytes, None)
}

fn cmd_sweep(c: &SweepCmd) -> Result<(), CliError> {
    let cfg = MetricConfig::with_nwd_c(c.nwd_c)?;
    let curves = simlab::sweep_sensitivity(&c.sizes, &c.offsets, &c.metrics, &cfg)?;
    emit_table(&curves, &c.output, Some(svg::sweep_chart(&curves)))
}

fn cmd_regress(c: &RegressCmd) -> Result<(), CliError> {
    let cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RegressionConfig>(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => {
            // clap enforces both unless --config is given
            let (Some(init), Some(target)) = (c.init, c.target) else {
                return Err(CliError::Usage("--init and --target are required".into()));
            };
            let mut cfg = RegressionConfig::new(init, target, c.metric.metric);
            cfg.learning_rate = c.lr;
            cfg.steps = c.steps;
            cfg.parametrization = match c.param {
                ParamArg::Direct => Parametrization::Direct,
                ParamArg::LogSize => Parametrization::LogSize,
            };
            cfg.gcd_loss = match c.gcd_loss {
                GcdLossArg::SquaredDistance => GcdLoss::SquaredDistance,
                GcdLossArg::OneMinusSimilarity => GcdLoss::OneMinusSimilarity,
            };
            cfg.metric_cfg = c.metric.config()?;
            cfg
        }
    };
    let trace = simlab::run_regression(&cfg)?;
    emit_table(&trace, &c.output, Some(svg::regression_chart(&trace)))
}

fn random_scene(c: &AssignCmd) -> Result<Vec<(f64, f64, Vec<BBox>)>, CliError> {
    if !(c.gt_min > 0.0 && c.gt_min <= c.gt_max && c.img_size > 0.0) {
        return Err(CliError::Usage(format!(
            "synthetic scene needs 0 < gt-min <= gt-max and img-size > 0, got {} {} {}",
            c.gt_min, c.gt_max, c.img_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut images = Vec::with_capacity(c.images);
    for _ in 0..c.images {
        let mut gts = Vec::with_capacity(c.gts_per_image);
        for _ in 0..c.gts_per_image {
            let w = rng.gen_range(c.gt_min..=c.gt_max);
            let h = rng.gen_range(c.gt_min..=c.gt_max);
            let cx = rng.gen_range(0.0..c.img_size);
            let cy = rng.gen_range(0.0..c.img_size);
            gts.push(BBox::new(cx, cy, w, h)?);
        }
        images.push((c.img_size, c.img_size, gts));
    }
    Ok(images)
}

fn cmd_assign(c: &AssignCmd) -> Result<(), CliError> {
    let m_cfg = c.metric.config()?;
    let a_cfg = AssignConfig {
        pos_threshold: c.pos,
        neg_threshold: c.neg,
        allow_low_quality: !c.no_low_quality,
    };
    let scene = match &c.coco {
        Some(path) => {
            let d = data::load_coco(path)?;
            d.images
                .iter()
                .map(|img| (img.width, img.height, d.boxes_for(img.id)))
                .collect()
        }
        None => random_scene(c)?,
    };
    let mut parts = Vec::with_capacity(scene.len());
    let mut all_gts = Vec::new();
    for (w, h, gts) in scene {
        let anchors = simlab::gen_anchor_grid(w, h, c.stride, &c.scales, &c.ratios)?;
        parts.push(simlab::assign(&anchors, &gts, c.metric.metric, &a_cfg, &m_cfg)?);
        all_gts.extend(gts);
    }
    let result = AssignResult::concat(parts);
    let summary = AssignSummary::new(c.metric.metric, &result, &all_gts, &c.buckets)?;
    emit_table(&summary, &c.output, None)
}

fn cmd_stats(c: &StatsCmd) -> Result<(), CliError> {
    let d = data::load_coco(&c.coco)?;
    let stats = data::dataset_stats(&d, &c.buckets)?;
    emit_table(&stats, &c.output, None)
}

#[derive(Serialize)]
struct Worst {
    pred: BBox,
    gt: BBox,
    #[serde(flatten)]
    diff: GradDiff,
}

#[derive(Serialize)]
struct GradcheckReport {
    trials: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
    abs_floor: f64,
    max_rel_error: f64,
    failures: usize,
    worst: Option<Worst>,
    passed: bool,
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let cx = rng.gen_range(-1000.0..=1000.0);
    let cy = rng.gen_range(-1000.0..=1000.0);
    let w = rng.gen_range(0.5..=500.0);
    let h = rng.gen_range(0.5..=500.0);
    BBox::new(cx, cy, w, h).expect("sampled box is valid")
}

fn cmd_gradcheck(c: &GradcheckCmd) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst: Option<Worst> = None;
    let mut failures = 0;
    for _ in 0..c.trials {
        let p = random_box(&mut rng);
        let t = random_box(&mut rng);
        let numeric = grad::gcd_fd_grad_extended(&p, &t, c.step)?;
        let diff = grad::compare_grads(&grad::gcd_grad(&p, &t), &numeric, c.abs_floor);
        if !(diff.rel_error <= c.tol) {
            failures += 1;
        }
        if worst.as_ref().is_none_or(|w| diff.rel_error > w.diff.rel_error) {
            worst = Some(Worst { pred: p, gt: t, diff });
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.diff.rel_error);
    let report = GradcheckReport {
        trials: c.trials,
        seed: c.seed,
        step: c.step,
        tolerance: c.tol,
        abs_floor: c.abs_floor,
        max_rel_error,
        failures,
        worst,
        passed: failures == 0,
    };
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    emit(&bytes, c.out.as_deref())?;
    if failures > 0 {
        let w = report.worst.as_ref().expect("a failure implies a worst pair");
        return Err(CliError::Verify(format!(
            "{failures} of {} trials exceed tolerance {}; worst {} on {}: analytic {} vs numeric {} for pred {:?} gt {:?}",
            c.trials,
            c.tol,
            w.diff.rel_error,
            w.diff.coord,
            w.diff.analytic,
            w.diff.numeric,
            w.pred.to_array(),
            w.gt.to_array()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Metric(c) => cmd_metric(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Regress(c) => cmd_regress(c),
        Command::Assign(c) => cmd_assign(c),
        Command::Stats(c) => cmd_stats(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Verify(msg)) => {
            eprintln!("gradcheck failed: {msg}");
            ExitCode::from(3)
        }
    }
}
