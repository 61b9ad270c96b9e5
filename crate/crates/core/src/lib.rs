//! Gaussian Combined Distance (GCD) for axis-aligned bounding boxes.
//!
//! Boxes are modeled as 2-D Gaussians with mean at the box center and
//! diagonal covariance `diag(w²/4, h²/4)`. On top of that representation the
//! crate provides:
//!
//! * [`metrics`]: GCD and the baselines it is usually compared against
//!   (Wasserstein distance, NWD, KLD, IoU, GIoU, DIoU),
//! * [`grad`]: analytic GCD gradients, loss gradients and a finite-difference
//!   oracle,
//! * [`simlab`]: small deterministic experiments (gradient-descent box
//!   regression, offset sensitivity sweeps, anchor label assignment),
//! * [`data`]: COCO annotation ingestion, size statistics and CSV/JSON export,
//! * [`svg`]: static line charts for sweep and regression outputs.

pub mod data;
pub mod error;
pub mod gbb;
pub mod grad;
pub mod metrics;
pub mod simlab;
pub mod svg;

pub use error::{Error, Result};
pub use gbb::{BBox, GaussianBox, MIN_DIM};
pub use grad::BoxGrad;
pub use metrics::{MetricConfig, MetricKind};
