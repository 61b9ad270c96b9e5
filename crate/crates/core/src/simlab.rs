//! Desk-scale experiments: box regression by gradient descent, offset
//! sensitivity sweeps, anchor grids and metric-driven label assignment.
//!
//! Every run is single-threaded and deterministic. Ties are broken toward the
//! lowest index.

use serde::{Deserialize, Serialize};

use crate::data::{validate_buckets, SizeRange};
use crate::error::{Error, Result};
use crate::gbb::{BBox, MIN_DIM};
use crate::grad::{self, BoxGrad};
use crate::metrics::{self, MetricConfig, MetricKind};

const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// Descend on `(cx, cy, w, h)` directly.
    Direct,
    /// Descend on `(cx, cy, ln w, ln h)`.
    #[default]
    LogSize,
}

/// How a GCD regression turns the distance into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcdLoss {
    /// Raw `D²`. Smooth at the optimum, so fixed-step descent converges.
    #[default]
    SquaredDistance,
    /// `1 − exp(−√D²)`, as returned by [`grad::loss_and_grad`]. Has a kink at
    /// the optimum: fixed-step descent ends up oscillating around the target.
    OneMinusSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub init: BBox,
    pub target: BBox,
    pub loss_kind: MetricKind,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub parametrization: Parametrization,
    #[serde(default)]
    pub gcd_loss: GcdLoss,
    #[serde(default)]
    pub metric_cfg: MetricConfig,
}

impl RegressionConfig {
    pub fn new(init: BBox, target: BBox, loss_kind: MetricKind) -> Self {
        Self {
            init,
            target,
            loss_kind,
            learning_rate: 0.1,
            steps: 2000,
            parametrization: Parametrization::LogSize,
            gcd_loss: GcdLoss::default(),
            metric_cfg: MetricConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    fn loss_and_grad(&self, p: &BBox) -> Result<(f64, BoxGrad)> {
        match (self.loss_kind, self.gcd_loss) {
            (MetricKind::Gcd, GcdLoss::SquaredDistance) => Ok(grad::gcd_squared_loss_and_grad(p, &self.target)),
            (kind, _) => grad::loss_and_grad(kind, p, &self.target, &self.metric_cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub iou: f64,
    /// A size coordinate could not move without leaving the valid range.
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_box: BBox,
    pub final_error: f64,
}

/// Largest per-field deviation from `target`: center offsets relative to the
/// target's width/height, sizes relative to themselves.
pub fn parameter_error(b: &BBox, target: &BBox) -> f64 {
    [
        (b.cx() - target.cx()).abs() / target.w(),
        (b.cy() - target.cy()).abs() / target.h(),
        (b.w() - target.w()).abs() / target.w(),
        (b.h() - target.h()).abs() / target.h(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn record(step: usize, loss: f64, b: &BBox, target: &BBox, stalled: bool) -> TraceRecord {
    TraceRecord {
        step,
        loss,
        cx: b.cx(),
        cy: b.cy(),
        w: b.w(),
        h: b.h(),
        iou: metrics::iou(b, target),
        stalled,
    }
}

fn finish(records: Vec<TraceRecord>, last: BBox, target: &BBox) -> Trace {
    Trace {
        records,
        final_error: parameter_error(&last, target),
        final_box: last,
    }
}

/// Moves one size coordinate against its gradient; returns `None` if no
/// step size down to `2⁻³⁰·lr` keeps it above the floor.
fn step_size(value: f64, d: f64, lr: f64, param: Parametrization, floor: f64) -> Option<f64> {
    let mut lr = lr;
    for _ in 0..=MAX_HALVINGS {
        let next = match param {
            Parametrization::Direct => value - lr * d,
            Parametrization::LogSize => (value.ln() - lr * value * d).exp(),
        };
        if next.is_finite() && next > floor {
            return Some(next);
        }
        lr *= 0.5;
    }
    None
}

/// Plain gradient descent from `cfg.init` toward `cfg.target`.
///
/// The trace holds `steps + 1` records, starting with the initial box. A
/// non-finite loss or gradient aborts with [`Error::Diverged`] carrying the
/// records gathered so far.
pub fn run_regression(cfg: &RegressionConfig) -> Result<Trace> {
    cfg.validate()?;
    let target = cfg.target;
    let floor = cfg.metric_cfg.eps().max(MIN_DIM);
    let lr = cfg.learning_rate;

    let mut current = cfg.init;
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let (mut loss, mut g) = cfg.loss_and_grad(&current)?;
    if !(loss.is_finite() && g.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            trace: Box::new(finish(records, current, &target)),
        });
    }
    records.push(record(0, loss, &current, &target, false));

    for step in 1..=cfg.steps {
        let cx = current.cx() - lr * g.d_cx;
        let cy = current.cy() - lr * g.d_cy;
        let w = step_size(current.w(), g.d_w, lr, cfg.parametrization, floor);
        let h = step_size(current.h(), g.d_h, lr, cfg.parametrization, floor);
        let stalled = w.is_none() || h.is_none();
        let next = BBox::new(cx, cy, w.unwrap_or(current.w()), h.unwrap_or(current.h()));

        let evaluated = next.and_then(|b| cfg.loss_and_grad(&b).map(|lg| (b, lg)));
        match evaluated {
            Ok((b, (l, gr))) if l.is_finite() && gr.is_finite() => {
                current = b;
                loss = l;
                g = gr;
            }
            _ => {
                return Err(Error::Diverged {
                    step,
                    trace: Box::new(finish(records, current, &target)),
                })
            }
        }
        records.push(record(step, loss, &current, &target, stalled));
    }
    Ok(finish(records, current, &target))
}

/// Similarity values on a size × offset × kind grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub sizes: Vec<f64>,
    pub offsets: Vec<f64>,
    pub kinds: Vec<MetricKind>,
    /// Row-major `[size][offset][kind]`.
    pub values: Vec<f64>,
}

impl Curves {
    pub fn get(&self, size_idx: usize, offset_idx: usize, kind_idx: usize) -> f64 {
        let (no, nk) = (self.offsets.len(), self.kinds.len());
        self.values[(size_idx * no + offset_idx) * nk + kind_idx]
    }

    /// Similarity for a given kind at grid indices, if the kind was swept.
    pub fn value(&self, size_idx: usize, offset_idx: usize, kind: MetricKind) -> Option<f64> {
        let k = self.kinds.iter().position(|&x| x == kind)?;
        Some(self.get(size_idx, offset_idx, k))
    }
}

/// Compares `Box(0, 0, s, s)` with `Box(d, 0, s, s)` for every size `s`,
/// offset `d` and kind.
pub fn sweep_sensitivity(
    sizes: &[f64],
    offsets: &[f64],
    kinds: &[MetricKind],
    cfg: &MetricConfig,
) -> Result<Curves> {
    if let Some(d) = offsets.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Config(format!("offsets must be finite and non-negative, got {d}")));
    }
    let mut values = Vec::with_capacity(sizes.len() * offsets.len() * kinds.len());
    for (i, &s) in sizes.iter().enumerate() {
        let reference = BBox::new(0.0, 0.0, s, s).map_err(|e| e.at("size", i))?;
        for &d in offsets {
            let shifted = BBox::new(d, 0.0, s, s)?;
            values.extend(kinds.iter().map(|&k| metrics::metric_eval(k, &reference, &shifted, cfg)));
        }
    }
    Ok(Curves {
        sizes: sizes.to_vec(),
        offsets: offsets.to_vec(),
        kinds: kinds.to_vec(),
        values,
    })
}

/// Anchors on a `stride` grid over an `img_w × img_h` image.
///
/// Cell `(i, j)` is centered at `((i+½)·stride, (j+½)·stride)` and gets one
/// anchor per `(scale, ratio)` with `w = scale·√ratio`, `h = scale/√ratio`.
/// Order: rows, then columns, then scales, then ratios.
pub fn gen_anchor_grid(img_w: f64, img_h: f64, stride: f64, scales: &[f64], ratios: &[f64]) -> Result<Vec<BBox>> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !(positive(img_w) && positive(img_h) && positive(stride)) {
        return Err(Error::Config(format!(
            "image size and stride must be positive, got {img_w}x{img_h} stride {stride}"
        )));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
    }
    if !scales.iter().chain(ratios).all(|&v| positive(v)) {
        return Err(Error::Config("anchor scales and ratios must be positive".into()));
    }
    let cols = (img_w / stride).ceil() as usize;
    let rows = (img_h / stride).ceil() as usize;
    let mut anchors = Vec::with_capacity(cols * rows * scales.len() * ratios.len());
    for j in 0..rows {
        let cy = (j as f64 + 0.5) * stride;
        for i in 0..cols {
            let cx = (i as f64 + 0.5) * stride;
            for &scale in scales {
                for &ratio in ratios {
                    let r = ratio.sqrt();
                    anchors.push(BBox::new(cx, cy, scale * r, scale / r)?);
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Each GT claims its best anchor even below `pos_threshold`.
    pub allow_low_quality: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            pos_threshold: 0.7,
            neg_threshold: 0.3,
            allow_low_quality: true,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        let (pos, neg) = (self.pos_threshold, self.neg_threshold);
        if !(pos.is_finite() && neg.is_finite() && neg <= pos) {
            return Err(Error::Config(format!(
                "thresholds must be finite with neg <= pos, got pos {pos} neg {neg}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "label", content = "gt")]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssignResult {
    pub labels: Vec<AnchorLabel>,
    pub num_positive: usize,
    pub num_negative: usize,
    pub num_ignore: usize,
    pub positives_per_gt: Vec<usize>,
}

impl AssignResult {
    fn from_labels(labels: Vec<AnchorLabel>, num_gts: usize) -> Self {
        let mut positives_per_gt = vec![0; num_gts];
        let (mut num_positive, mut num_negative, mut num_ignore) = (0, 0, 0);
        for label in &labels {
            match label {
                AnchorLabel::Positive(j) => {
                    num_positive += 1;
                    positives_per_gt[*j] += 1;
                }
                AnchorLabel::Negative => num_negative += 1,
                AnchorLabel::Ignore => num_ignore += 1,
            }
        }
        Self {
            labels,
            num_positive,
            num_negative,
            num_ignore,
            positives_per_gt,
        }
    }
}

impl AssignResult {
    /// Concatenates per-image results; GT indices of later parts are shifted
    /// past the GTs of earlier parts.
    pub fn concat(parts: impl IntoIterator<Item = AssignResult>) -> AssignResult {
        let mut labels = Vec::new();
        let mut num_gts = 0;
        for part in parts {
            labels.extend(part.labels.into_iter().map(|l| match l {
                AnchorLabel::Positive(j) => AnchorLabel::Positive(j + num_gts),
                other => other,
            }));
            num_gts += part.positives_per_gt.len();
        }
        AssignResult::from_labels(labels, num_gts)
    }
}

/// Assignment outcome condensed to totals and per-size-bucket statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignSummary {
    pub metric: MetricKind,
    pub num_anchors: usize,
    pub num_gts: usize,
    pub num_positive: usize,
    pub num_negative: usize,
    pub num_ignore: usize,
    pub buckets: Vec<BucketStats>,
}

impl AssignSummary {
    pub fn new(metric: MetricKind, r: &AssignResult, gts: &[BBox], buckets: &[SizeRange]) -> Result<Self> {
        Ok(Self {
            metric,
            num_anchors: r.labels.len(),
            num_gts: gts.len(),
            num_positive: r.num_positive,
            num_negative: r.num_negative,
            num_ignore: r.num_ignore,
            buckets: assign_stats(r, gts, buckets)?,
        })
    }
}

/// Max-similarity label assignment.
///
/// An anchor whose best similarity `m` over all GTs reaches `pos_threshold`
/// becomes positive for the (lowest-index) best GT; `m < neg_threshold` makes
/// it negative; anything between is ignored. With `allow_low_quality`, each
/// GT then claims its own best anchor, later GTs overriding earlier ones.
pub fn assign(
    anchors: &[BBox],
    gts: &[BBox],
    kind: MetricKind,
    a_cfg: &AssignConfig,
    m_cfg: &MetricConfig,
) -> Result<AssignResult> {
    a_cfg.validate()?;
    if gts.is_empty() {
        return Ok(AssignResult::from_labels(vec![AnchorLabel::Negative; anchors.len()], 0));
    }
    let sim = metrics::pairwise_matrix(anchors, gts, kind, m_cfg);

    let mut labels: Vec<AnchorLabel> = sim
        .rows()
        .into_iter()
        .map(|row| {
            let (best_gt, best) = argmax(row.iter().copied());
            if best >= a_cfg.pos_threshold {
                AnchorLabel::Positive(best_gt)
            } else if best < a_cfg.neg_threshold {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    if a_cfg.allow_low_quality && !anchors.is_empty() {
        for (j, col) in sim.columns().into_iter().enumerate() {
            let (best_anchor, _) = argmax(col.iter().copied());
            labels[best_anchor] = AnchorLabel::Positive(j);
        }
    }
    Ok(AssignResult::from_labels(labels, gts.len()))
}

/// First index of the maximum; `(0, -inf)` for an empty iterator.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketStats {
    pub lo: f64,
    pub hi: f64,
    pub gt_count: usize,
    /// `None` when the bucket holds no GT.
    pub mean_positives: Option<f64>,
    pub zero_positive_gts: usize,
}

/// Per size bucket: how many GTs fall in it, how many positive anchors they
/// get on average, and how many get none. GTs outside every bucket are not
/// reported.
pub fn assign_stats(r: &AssignResult, gts: &[BBox], buckets: &[SizeRange]) -> Result<Vec<BucketStats>> {
    validate_buckets(buckets)?;
    if r.positives_per_gt.len() != gts.len() {
        return Err(Error::Config(format!(
            "assignment covers {} GTs but {} were given",
            r.positives_per_gt.len(),
            gts.len()
        )));
    }
    let mut out: Vec<BucketStats> = buckets
        .iter()
        .map(|b| BucketStats {
            lo: b.lo,
            hi: b.hi,
            gt_count: 0,
            mean_positives: None,
            zero_positive_gts: 0,
        })
        .collect();
    let mut sums = vec![0usize; buckets.len()];
    for (gt, &npos) in gts.iter().zip(&r.positives_per_gt) {
        if let Some(k) = buckets.iter().position(|b| b.contains(gt.size())) {
            out[k].gt_count += 1;
            sums[k] += npos;
            if npos == 0 {
                out[k].zero_positive_gts += 1;
            }
        }
    }
    for (stats, sum) in out.iter_mut().zip(sums) {
        if stats.gt_count > 0 {
            stats.mean_positives = Some(sum as f64 / stats.gt_count as f64);
        }
    }
    Ok(out)
}
