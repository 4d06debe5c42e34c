//! Language-guided metric calibration of relative depth maps.
//!
//! A frozen relative-depth backbone produces an inverse depth map `Y` up to
//! an unknown affine transform. Two small heads recover the transform: an
//! envelope head maps a caption embedding to a box of plausible
//! calibrations, and a selector maps pooled image features to a point
//! inside that box. Training is supervised by the per-image least-squares
//! fit against ground truth.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the common `f64` case.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod data;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod oracle;
pub mod scalar;
pub mod trainer;

pub use calib::{
    compose, logit, map_params, recover_metric, sigmoid, softplus, softplus_inv, unmap_params, CalibBounds, ConstrainedCalib, DepthMap,
    Envelope, InverseDepthMap, Mask, Offset, UnconstrainedCalib,
};
pub use error::{Error, Result};
pub use heads::{HeadArch, PooledFeature, TextEmbedding};
pub use losses::{unified_loss, LossBreakdown, LossWeights};
pub use metrics::{aggregate_metrics, compute_metrics, EvalConfig, MetricsReport};
pub use model::{CalibModel, ForwardMode, Prediction};
pub use oracle::{fit_oracle, OracleTarget};
pub use scalar::Scalar;

pub type DepthMap64 = DepthMap<f64>;
pub type InverseDepthMap64 = InverseDepthMap<f64>;
pub type CalibBounds64 = CalibBounds<f64>;
pub type CalibModel64 = CalibModel<f64>;
pub type OracleTarget64 = OracleTarget<f64>;
pub type Sample64 = data::Sample<f64>;
