//! Gradients with respect to the predicted box `(cx, cy, w, h)`.

use std::ops::{Add, Mul, Sub};

use serde::Serialize;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::gbb::BBox;
use crate::metrics::{self, MetricConfig, MetricKind};

/// Default central-difference step, in pixels.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Partial derivatives of a scalar objective w.r.t. the predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BoxGrad {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
}

impl BoxGrad {
    pub const COORDS: [&'static str; 4] = ["cx", "cy", "w", "h"];

    pub fn new(d_cx: f64, d_cy: f64, d_w: f64, d_h: f64) -> Self {
        Self { d_cx, d_cy, d_w, d_h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.d_cx, self.d_cy, self.d_w, self.d_h]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Add for BoxGrad {
    type Output = BoxGrad;

    fn add(self, o: BoxGrad) -> BoxGrad {
        BoxGrad::new(self.d_cx + o.d_cx, self.d_cy + o.d_cy, self.d_w + o.d_w, self.d_h + o.d_h)
    }
}

impl Sub for BoxGrad {
    type Output = BoxGrad;

    fn sub(self, o: BoxGrad) -> BoxGrad {
        BoxGrad::new(self.d_cx - o.d_cx, self.d_cy - o.d_cy, self.d_w - o.d_w, self.d_h - o.d_h)
    }
}

impl Mul<f64> for BoxGrad {
    type Output = BoxGrad;

    fn mul(self, s: f64) -> BoxGrad {
        BoxGrad::new(self.d_cx * s, self.d_cy * s, self.d_w * s, self.d_h * s)
    }
}

/// Analytic gradient of [`metrics::gcd_squared`] w.r.t. `p`.
///
/// The center components scale with `(wt² + wp²)/(wt²·wp²)`, so small boxes
/// receive proportionally larger center gradients.
pub fn gcd_grad(p: &BBox, t: &BBox) -> BoxGrad {
    let (xp, yp, wp, hp) = (p.cx(), p.cy(), p.w(), p.h());
    let (xt, yt, wt, ht) = (t.cx(), t.cy(), t.w(), t.h());
    let (wp2, hp2, wt2, ht2) = (wp * wp, hp * hp, wt * wt, ht * ht);
    let (wp3, hp3, wt3, ht3) = (wp2 * wp, hp2 * hp, wt2 * wt, ht2 * ht);

    let d_cx = (wt2 + wp2) * (xp - xt) / (wt2 * wp2);
    let d_cy = (ht2 + hp2) * (yp - yt) / (ht2 * hp2);
    let d_w = (wp * wt - wt2) * ((wt3 + wp3) / (4.0 * wt3 * wp3)) - (xp - xt) * (xp - xt) / wp3;
    let d_h = (hp * ht - ht2) * ((ht3 + hp3) / (4.0 * ht3 * hp3)) - (yp - yt) * (yp - yt) / hp3;
    BoxGrad::new(d_cx, d_cy, d_w, d_h)
}

/// Gradient of [`metrics::wd_squared`] w.r.t. the predicted center only.
/// Contains no width or height terms.
pub fn wd_center_grad(p: &BBox, t: &BBox) -> [f64; 2] {
    [2.0 * (p.cx() - t.cx()), 2.0 * (p.cy() - t.cy())]
}

/// Full gradient of [`metrics::wd_squared`] w.r.t. `p`.
pub fn wd_grad(p: &BBox, t: &BBox) -> BoxGrad {
    let [d_cx, d_cy] = wd_center_grad(p, t);
    BoxGrad::new(d_cx, d_cy, (p.w() - t.w()) / 2.0, (p.h() - t.h()) / 2.0)
}

/// Central differences of `objective` around `p`, one coordinate at a time.
pub fn finite_diff_grad<F>(objective: F, p: &BBox, step: f64) -> Result<BoxGrad>
where
    F: Fn(&BBox) -> f64,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let base = p.to_array();
    let mut out = [0.0; 4];
    for (i, coord) in BoxGrad::COORDS.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut v = base;
            v[i] += delta;
            BBox::from_array(v).map_err(|e| Error::Perturbation {
                coord,
                source: Box::new(e),
            })
        };
        let plus = shifted(step)?;
        let minus = shifted(-step)?;
        out[i] = (objective(&plus) - objective(&minus)) / (2.0 * step);
    }
    Ok(BoxGrad::from_array(out))
}

/// Regression loss for `kind` together with its gradient w.r.t. `p`.
///
/// * GCD: `1 − exp(−√D²)`, analytic gradient through the normalization; the
///   gradient at exact coincidence is defined as zero.
/// * WD: `wd_squared`, analytic gradient.
/// * everything else: `1 − metric_eval`, central-difference gradient.
pub fn loss_and_grad(kind: MetricKind, p: &BBox, t: &BBox, cfg: &MetricConfig) -> Result<(f64, BoxGrad)> {
    match kind {
        MetricKind::Gcd => {
            let d2 = metrics::gcd_squared(p, t);
            let m = (-d2.sqrt()).exp();
            if d2 == 0.0 {
                return Ok((0.0, BoxGrad::default()));
            }
            let scale = m / (2.0 * d2.sqrt().max(cfg.eps()));
            Ok((1.0 - m, gcd_grad(p, t) * scale))
        }
        MetricKind::Wd => Ok((metrics::wd_squared(p, t), wd_grad(p, t))),
        MetricKind::Nwd | MetricKind::Kld | MetricKind::Iou | MetricKind::Giou | MetricKind::Diou => {
            let loss = |b: &BBox| 1.0 - metrics::metric_eval(kind, b, t, cfg);
            let g = finite_diff_grad(loss, p, DEFAULT_FD_STEP)?;
            Ok((loss(p), g))
        }
    }
}

/// Raw `D²` as a loss, with the analytic gradient.
pub fn gcd_squared_loss_and_grad(p: &BBox, t: &BBox) -> (f64, BoxGrad) {
    (metrics::gcd_squared(p, t), gcd_grad(p, t))
}

/// `D²` evaluated in double-double arithmetic from the same four terms as
/// [`metrics::gcd_squared`].
fn gcd_squared_dd(p: [TwoFloat; 4], t: [f64; 4]) -> TwoFloat {
    let [xp, yp, wp, hp] = p;
    let [xt, yt, wt, ht] = t.map(TwoFloat::from);
    let half = TwoFloat::from(0.5);
    let four = TwoFloat::from(4.0);
    let sq = |v: TwoFloat| v * v;
    let (dx, dy, dw, dh) = (xp - xt, yp - yt, wp - wt, hp - ht);

    let center_p = half * (sq(dx) / sq(wp) + sq(dy) / sq(hp));
    let shape_p = half * (sq(dw) / (four * sq(wp)) + sq(dh) / (four * sq(hp)));
    let center_t = half * (sq(dx) / sq(wt) + sq(dy) / sq(ht));
    let shape_t = half * (sq(dw) / (four * sq(wt)) + sq(dh) / (four * sq(ht)));
    center_p + shape_p + center_t + shape_t
}

/// Central-difference gradient of `D²(·, t)` at `p` with the objective and
/// the difference quotient carried in double-double precision.
///
/// Plain `f64` central differences lose about `ε·D²/step` to cancellation,
/// which swamps small gradient components when `D²` is large. This is the
/// reference used to check [`gcd_grad`].
pub fn gcd_fd_grad_extended(p: &BBox, t: &BBox, step: f64) -> Result<BoxGrad> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    // same validity rules for the perturbed boxes as the f64 path
    finite_diff_grad(|_| 0.0, p, step)?;
    let base = p.to_array();
    let target = t.to_array();
    let mut out = [0.0; 4];
    for i in 0..4 {
        let shifted = |delta: f64| {
            let mut v = base.map(TwoFloat::from);
            v[i] += TwoFloat::from(delta);
            gcd_squared_dd(v, target)
        };
        let diff = (shifted(step) - shifted(-step)) / TwoFloat::from(2.0 * step);
        out[i] = f64::from(diff);
    }
    Ok(BoxGrad::from_array(out))
}

/// Worst coordinate-wise disagreement between two gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradDiff {
    /// `|a − b| / max(|a|, |b|)`, or 0 where `|a − b|` is within the absolute floor.
    pub rel_error: f64,
    pub coord: &'static str,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare_grads(analytic: &BoxGrad, numeric: &BoxGrad, abs_floor: f64) -> GradDiff {
    let mut worst = GradDiff {
        rel_error: 0.0,
        coord: BoxGrad::COORDS[0],
        analytic: analytic.d_cx,
        numeric: numeric.d_cx,
    };
    for (i, (a, n)) in analytic.to_array().into_iter().zip(numeric.to_array()).enumerate() {
        let diff = (a - n).abs();
        let rel = if diff <= abs_floor { 0.0 } else { diff / a.abs().max(n.abs()) };
        if rel > worst.rel_error || rel.is_nan() {
            worst = GradDiff {
                rel_error: rel,
                coord: BoxGrad::COORDS[i],
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{gcd_squared, wd_squared};

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn gcd_grad_examples() {
        let p = b(0.0, 0.0, 2.0, 2.0);
        let t = b(1.0, 0.0, 2.0, 2.0);
        assert_eq!(gcd_grad(&t, &t), BoxGrad::default());
        let g = gcd_grad(&p, &t);
        assert_eq!(g.d_cx, -0.5);
        assert_eq!(g.d_w, -0.125);
        assert_eq!(g.d_cy, 0.0);
        assert_eq!(g.d_h, 0.0);
    }

    #[test]
    fn wd_center_examples() {
        let p = b(0.0, 0.0, 2.0, 2.0);
        let t = b(1.0, 0.0, 2.0, 2.0);
        assert_eq!(wd_center_grad(&t, &t), [0.0, 0.0]);
        assert_eq!(wd_center_grad(&p, &t), [-2.0, 0.0]);
        let p10 = b(0.0, 0.0, 20.0, 20.0);
        let t10 = b(1.0, 0.0, 20.0, 20.0);
        assert_eq!(wd_center_grad(&p10, &t10), wd_center_grad(&p, &t));
    }

    #[test]
    fn loss_examples() {
        let cfg = MetricConfig::default();
        let p = b(0.0, 0.0, 2.0, 2.0);
        let t = b(1.0, 0.0, 2.0, 2.0);

        let (loss, g) = loss_and_grad(MetricKind::Gcd, &t, &t, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g, BoxGrad::default());

        let (loss, g) = loss_and_grad(MetricKind::Gcd, &p, &t, &cfg).unwrap();
        close(loss, 0.393469, 1e-6);
        close(g.d_cx, -0.303265, 1e-6);
        close(g.d_cx, (-0.5f64).exp() * -0.5 / (2.0 * 0.5), 1e-15);

        let (loss, g) = loss_and_grad(MetricKind::Wd, &p, &t, &cfg).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g, BoxGrad::new(-2.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn gcd_loss_gradient_matches_finite_differences() {
        let cfg = MetricConfig::default();
        let p = b(3.0, -2.0, 5.0, 7.0);
        let t = b(4.5, -1.0, 6.0, 4.0);
        let (_, g) = loss_and_grad(MetricKind::Gcd, &p, &t, &cfg).unwrap();
        let fd = finite_diff_grad(|x| 1.0 - metrics::gcd_metric(x, &t), &p, DEFAULT_FD_STEP).unwrap();
        for (a, e) in g.to_array().into_iter().zip(fd.to_array()) {
            close(a, e, 1e-8);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let t = b(1.0, 0.0, 2.0, 2.0);
        let at_target = finite_diff_grad(|x| gcd_squared(x, &t), &t, 1e-5).unwrap();
        for v in at_target.to_array() {
            close(v, 0.0, 1e-8);
        }
        let p = b(0.0, 0.0, 2.0, 2.0);
        let fd = finite_diff_grad(|x| gcd_squared(x, &t), &p, 1e-5).unwrap();
        close(fd.d_cx, -0.5, 1e-6);

        let p = b(2.0, -3.0, 5.0, 9.0);
        let t = b(-1.0, 4.0, 7.0, 2.0);
        let fd = finite_diff_grad(|x| wd_squared(x, &t), &p, 1e-5).unwrap();
        let expected = [2.0 * 3.0, 2.0 * -7.0, (5.0 - 7.0) / 2.0, (9.0 - 2.0) / 2.0];
        for (a, e) in fd.to_array().into_iter().zip(expected) {
            close(a, e, 1e-6);
        }
    }

    #[test]
    fn extended_oracle_resolves_small_components() {
        // D² ≈ 3e6 here; f64 central differences are off by ~1e-2 on d_h.
        let p = b(-901.430130156486, 0.0, 0.5, 398.6179895781767);
        let t = b(0.0, 0.0, 0.5, 400.0);
        let analytic = gcd_grad(&p, &t);
        let fd = gcd_fd_grad_extended(&p, &t, 1e-5).unwrap();
        for (a, n) in analytic.to_array().into_iter().zip(fd.to_array()) {
            assert!((a - n).abs() <= 1e-7 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        }
        assert!(gcd_fd_grad_extended(&b(0.0, 0.0, 1e-6, 1.0), &t, 1e-5).is_err());
    }

    #[test]
    fn grad_comparison() {
        let a = BoxGrad::new(1.0, 2.0, 1e-9, 4.0);
        let n = BoxGrad::new(1.0, 2.2, 3e-9, 4.0);
        let d = compare_grads(&a, &n, 1e-8);
        assert_eq!(d.coord, "cy");
        close(d.rel_error, 0.2 / 2.2, 1e-15);
        assert_eq!(compare_grads(&a, &a, 1e-8).rel_error, 0.0);
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let p = b(0.0, 0.0, 1e-6, 1.0);
        let err = finite_diff_grad(|x| x.w(), &p, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Perturbation { coord: "w", .. }), "{err}");
        assert!(finite_diff_grad(|x| x.w(), &p, 0.0).is_err());
    }

    #[test]
    fn fd_kinds_vanish_without_overlap() {
        let cfg = MetricConfig::default();
        let p = b(0.0, 0.0, 2.0, 2.0);
        let t = b(10.0, 0.0, 2.0, 2.0);
        let (loss, g) = loss_and_grad(MetricKind::Iou, &p, &t, &cfg).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g, BoxGrad::default());
        let (_, g) = loss_and_grad(MetricKind::Gcd, &p, &t, &cfg).unwrap();
        assert!(g.d_cx < 0.0);
        for kind in MetricKind::ALL {
            let (loss, g) = loss_and_grad(kind, &p, &t, &cfg).unwrap();
            assert!(loss.is_finite() && g.is_finite(), "{kind}");
        }
    }
}
