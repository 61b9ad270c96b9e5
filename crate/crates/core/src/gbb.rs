//! Box representations and the Gaussian box model.
//!
//! The library works in center form `(cx, cy, w, h)` everywhere; corner form
//! only shows up when ingesting annotation files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted width or height, in pixels.
pub const MIN_DIM: f64 = 1e-7;

/// Axis-aligned box in center parametrization, in pixels.
///
/// Construction validates the box, so every `BBox` value has finite fields
/// and `w, h >= MIN_DIM`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.cx, r.cy, r.w, r.h)
    }
}

fn check_coord(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteCoordinate { field, value })
    }
}

fn check_dim(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= MIN_DIM {
        Ok(())
    } else {
        Err(Error::InvalidBox {
            field,
            value,
            min: MIN_DIM,
        })
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        check_coord("cx", cx)?;
        check_coord("cy", cy)?;
        check_dim("width", w)?;
        check_dim("height", h)?;
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from its top-left corner and size (COCO `bbox` layout).
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        check_coord("x", x)?;
        check_coord("y", y)?;
        check_dim("width", w)?;
        check_dim("height", h)?;
        BBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Builds a box from a `[cx, cy, w, h]` row.
    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Geometric side length `√(w·h)`, used for size buckets.
    pub fn size(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn to_gaussian(&self) -> GaussianBox {
        GaussianBox {
            mu_x: self.cx,
            mu_y: self.cy,
            var_x: self.w * self.w / 4.0,
            var_y: self.h * self.h / 4.0,
        }
    }

    /// Applies `x ↦ diag(sx, sy)·x + (dx, dy)` to the box.
    pub fn affine_apply(&self, sx: f64, sy: f64, dx: f64, dy: f64) -> Result<Self> {
        for (field, value) in [("sx", sx), ("sy", sy)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidTransform { field, value });
            }
        }
        for (field, value) in [("dx", dx), ("dy", dy)] {
            if !value.is_finite() {
                return Err(Error::InvalidTransform { field, value });
            }
        }
        BBox::new(sx * self.cx + dx, sy * self.cy + dy, sx * self.w, sy * self.h)
    }
}

/// 2-D Gaussian with diagonal covariance; the distribution a [`BBox`] maps to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianBox {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
}

impl GaussianBox {
    pub fn new(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64) -> Result<Self> {
        for (field, value) in [("mu_x", mu_x), ("mu_y", mu_y)] {
            if !value.is_finite() {
                return Err(Error::InvalidGaussian { field, value });
            }
        }
        for (field, value) in [("var_x", var_x), ("var_y", var_y)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidGaussian { field, value });
            }
        }
        Ok(Self {
            mu_x,
            mu_y,
            var_x,
            var_y,
        })
    }

    pub fn to_box(&self) -> Result<BBox> {
        let g = GaussianBox::new(self.mu_x, self.mu_y, self.var_x, self.var_y)?;
        BBox::new(g.mu_x, g.mu_y, 2.0 * g.var_x.sqrt(), 2.0 * g.var_y.sqrt())
    }
}
