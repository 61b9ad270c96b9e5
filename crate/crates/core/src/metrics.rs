//! Box similarity metrics.
//!
//! Distances (`gcd_squared`, `wd_squared`, `kld`) are exposed in raw form;
//! [`metric_eval`] maps every kind onto a "larger is more similar" scale so
//! thresholds can be applied uniformly.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbb::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Gcd,
    Wd,
    Nwd,
    Kld,
    Iou,
    Giou,
    Diou,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::Gcd,
        MetricKind::Wd,
        MetricKind::Nwd,
        MetricKind::Kld,
        MetricKind::Iou,
        MetricKind::Giou,
        MetricKind::Diou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Gcd => "gcd",
            MetricKind::Wd => "wd",
            MetricKind::Nwd => "nwd",
            MetricKind::Kld => "kld",
            MetricKind::Iou => "iou",
            MetricKind::Giou => "giou",
            MetricKind::Diou => "diou",
        }
    }

    /// Whether the similarity is unchanged when both boxes go through the
    /// same positive scaling.
    pub fn is_scale_invariant(self) -> bool {
        !matches!(self, MetricKind::Wd | MetricKind::Nwd)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown metric kind {s:?} (expected one of gcd, wd, nwd, kld, iou, giou, diou)"
                ))
            })
    }
}

pub const DEFAULT_NWD_C: f64 = 12.8;
pub const DEFAULT_EPS: f64 = 1e-7;

/// Metric constants: NWD's normalizer `C` (pixels) and the numerical floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetricConfig")]
pub struct MetricConfig {
    nwd_c: f64,
    eps: f64,
}

#[derive(Deserialize)]
struct RawMetricConfig {
    #[serde(default = "default_nwd_c")]
    nwd_c: f64,
    #[serde(default = "default_eps")]
    eps: f64,
}

fn default_nwd_c() -> f64 {
    DEFAULT_NWD_C
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl TryFrom<RawMetricConfig> for MetricConfig {
    type Error = Error;

    fn try_from(r: RawMetricConfig) -> Result<Self> {
        MetricConfig::new(r.nwd_c, r.eps)
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            nwd_c: DEFAULT_NWD_C,
            eps: DEFAULT_EPS,
        }
    }
}

impl MetricConfig {
    pub fn new(nwd_c: f64, eps: f64) -> Result<Self> {
        if !(nwd_c.is_finite() && nwd_c > 0.0) {
            return Err(Error::Config(format!("nwd_c must be positive, got {nwd_c}")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { nwd_c, eps })
    }

    pub fn with_nwd_c(nwd_c: f64) -> Result<Self> {
        Self::new(nwd_c, DEFAULT_EPS)
    }

    pub fn nwd_c(&self) -> f64 {
        self.nwd_c
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Squared Gaussian Combined Distance, as the four-term scalar sum:
///
/// ```text
/// ½[(xp−xt)²/wp² + (yp−yt)²/hp²] + ½[(wp−wt)²/(4wp²) + (hp−ht)²/(4hp²)]
/// + ½[(xt−xp)²/wt² + (yt−yp)²/ht²] + ½[(wt−wp)²/(4wt²) + (ht−hp)²/(4ht²)]
/// ```
pub fn gcd_squared(p: &BBox, t: &BBox) -> f64 {
    let (dx, dy) = (p.cx() - t.cx(), p.cy() - t.cy());
    let (dw, dh) = (p.w() - t.w(), p.h() - t.h());
    let (wp2, hp2) = (p.w() * p.w(), p.h() * p.h());
    let (wt2, ht2) = (t.w() * t.w(), t.h() * t.h());

    let center_p = 0.5 * (dx * dx / wp2 + dy * dy / hp2);
    let shape_p = 0.5 * (dw * dw / (4.0 * wp2) + dh * dh / (4.0 * hp2));
    let center_t = 0.5 * (dx * dx / wt2 + dy * dy / ht2);
    let shape_t = 0.5 * (dw * dw / (4.0 * wt2) + dh * dh / (4.0 * ht2));
    center_p + shape_p + center_t + shape_t
}

/// `exp(−√D²)`, in `(0, 1]`.
pub fn gcd_metric(p: &BBox, t: &BBox) -> f64 {
    (-gcd_squared(p, t).sqrt()).exp()
}

/// Squared 2-Wasserstein distance between the two box Gaussians, in px².
pub fn wd_squared(p: &BBox, t: &BBox) -> f64 {
    let (dx, dy) = (p.cx() - t.cx(), p.cy() - t.cy());
    let (dw, dh) = (p.w() - t.w(), p.h() - t.h());
    dx * dx + dy * dy + (dw * dw + dh * dh) / 4.0
}

/// Normalized Wasserstein distance `exp(−W₂ / C)`.
pub fn nwd(p: &BBox, t: &BBox, cfg: &MetricConfig) -> f64 {
    (-wd_squared(p, t).sqrt() / cfg.nwd_c()).exp()
}

/// KL(N_p ‖ N_t) between the box Gaussians. Not symmetric.
pub fn kld(p: &BBox, t: &BBox) -> f64 {
    let (dx, dy) = (p.cx() - t.cx(), p.cy() - t.cy());
    let (wp2, hp2) = (p.w() * p.w(), p.h() * p.h());
    let (wt2, ht2) = (t.w() * t.w(), t.h() * t.h());
    let trace = wp2 / wt2 + hp2 / ht2;
    let mahalanobis = 4.0 * dx * dx / wt2 + 4.0 * dy * dy / ht2;
    let log_det = ((wt2 * ht2) / (wp2 * hp2)).ln();
    0.5 * (trace + mahalanobis - 2.0 + log_det)
}

fn intersection(p: &BBox, t: &BBox) -> f64 {
    let iw = (p.right().min(t.right()) - p.left().max(t.left())).max(0.0);
    let ih = (p.bottom().min(t.bottom()) - p.top().max(t.top())).max(0.0);
    iw * ih
}

fn enclosing_wh(p: &BBox, t: &BBox) -> (f64, f64) {
    (
        p.right().max(t.right()) - p.left().min(t.left()),
        p.bottom().max(t.bottom()) - p.top().min(t.top()),
    )
}

pub fn iou(p: &BBox, t: &BBox) -> f64 {
    let inter = intersection(p, t);
    inter / (p.area() + t.area() - inter)
}

/// IoU minus the share of the smallest enclosing box not covered by the union.
pub fn giou(p: &BBox, t: &BBox) -> f64 {
    let inter = intersection(p, t);
    let union = p.area() + t.area() - inter;
    let (ew, eh) = enclosing_wh(p, t);
    let enclosing = ew * eh;
    inter / union - (enclosing - union) / enclosing
}

/// IoU minus squared center distance over squared enclosing-box diagonal.
pub fn diou(p: &BBox, t: &BBox) -> f64 {
    let (dx, dy) = (p.cx() - t.cx(), p.cy() - t.cy());
    let (ew, eh) = enclosing_wh(p, t);
    iou(p, t) - (dx * dx + dy * dy) / (ew * ew + eh * eh)
}

/// Similarity of `p` to `t` under `kind`; larger means more similar.
pub fn metric_eval(kind: MetricKind, p: &BBox, t: &BBox, cfg: &MetricConfig) -> f64 {
    match kind {
        MetricKind::Gcd => gcd_metric(p, t),
        MetricKind::Wd => (-wd_squared(p, t).sqrt()).exp(),
        MetricKind::Nwd => nwd(p, t, cfg),
        MetricKind::Kld => (-kld(p, t)).exp(),
        MetricKind::Iou => iou(p, t),
        MetricKind::Giou => giou(p, t),
        MetricKind::Diou => diou(p, t),
    }
}

/// The raw distance behind a similarity, where the kind has one.
pub fn distance(kind: MetricKind, p: &BBox, t: &BBox) -> Option<f64> {
    match kind {
        MetricKind::Gcd => Some(gcd_squared(p, t)),
        MetricKind::Wd | MetricKind::Nwd => Some(wd_squared(p, t)),
        MetricKind::Kld => Some(kld(p, t)),
        MetricKind::Iou | MetricKind::Giou | MetricKind::Diou => None,
    }
}

/// All-pairs similarities; entry `(i, j)` compares `preds[i]` with `gts[j]`.
pub fn pairwise_matrix(preds: &[BBox], gts: &[BBox], kind: MetricKind, cfg: &MetricConfig) -> Array2<f64> {
    Array2::from_shape_fn((preds.len(), gts.len()), |(i, j)| {
        metric_eval(kind, &preds[i], &gts[j], cfg)
    })
}

/// Validates `[cx, cy, w, h]` rows; the error names the offending row.
pub fn boxes_from_rows(rows: &[[f64; 4]], side: &'static str) -> Result<Vec<BBox>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| BBox::from_array(*r).map_err(|e| e.at(side, i)))
        .collect()
}
