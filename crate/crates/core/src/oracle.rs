//! Closed-form per-image least-squares calibration in inverse depth.

use serde::{Deserialize, Serialize};

use crate::calib::{unmap_params, CalibBounds, ConstrainedCalib, DepthMap, InverseDepthMap, Mask, UnconstrainedCalib};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ground-truth inverse depth together with the validity mask of the depth
/// map it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedDepth<T> {
    pub inverse: InverseDepthMap<T>,
    pub mask: Mask,
}

/// `1 / max(d, eps)` per pixel. Invalid pixels are still inverted but stay
/// outside the mask.
pub fn invert_depth<T: Scalar>(depth: &DepthMap<T>, eps: T) -> InvertedDepth<T> {
    let values = depth.values().iter().map(|&d| T::one() / d.max(eps)).collect();
    InvertedDepth {
        inverse: InverseDepthMap::new(depth.height(), depth.width(), values).expect("reciprocal of a floored finite grid is finite"),
        mask: depth.mask(),
    }
}

/// First and second moments of paired samples `(y, g)`.
///
/// Accumulated with Welford/Chan updates so that per-image moments can be
/// merged into pooled dataset moments without losing precision.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairMoments<T> {
    pub n: usize,
    pub mean_y: T,
    pub mean_g: T,
    /// Sum of squared deviations of `y`.
    pub m2_y: T,
    /// Sum of co-deviations of `y` and `g`.
    pub c_yg: T,
}

impl<T: Scalar> PairMoments<T> {
    pub fn new() -> Self {
        Self { n: 0, mean_y: T::zero(), mean_g: T::zero(), m2_y: T::zero(), c_yg: T::zero() }
    }

    #[inline]
    pub fn push(&mut self, y: T, g: T) {
        self.n += 1;
        let n = T::from_usize(self.n).unwrap();
        let dy = y - self.mean_y;
        self.mean_y += dy / n;
        self.mean_g += (g - self.mean_g) / n;
        self.m2_y += dy * (y - self.mean_y);
        self.c_yg += dy * (g - self.mean_g);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let na = T::from_usize(self.n).unwrap();
        let nb = T::from_usize(other.n).unwrap();
        let n = na + nb;
        let dy = other.mean_y - self.mean_y;
        let dg = other.mean_g - self.mean_g;
        self.m2_y += other.m2_y + dy * dy * na * nb / n;
        self.c_yg += other.c_yg + dy * dg * na * nb / n;
        self.mean_y += dy * nb / n;
        self.mean_g += dg * nb / n;
        self.n += other.n;
    }

    /// Moments of `(Y, 1/max(D_gt, eps))` over the valid pixels of `D_gt`.
    pub fn from_maps(y: &InverseDepthMap<T>, gt: &DepthMap<T>, eps: T) -> Result<Self> {
        y.check_shape(gt.height(), gt.width(), "oracle inputs")?;
        let mut m = Self::new();
        for (&yv, &d) in y.values().iter().zip(gt.values()) {
            if d > T::zero() {
                m.push(yv, T::one() / d.max(eps));
            }
        }
        Ok(m)
    }

    /// Population variance of `y`.
    pub fn var_y(&self) -> T {
        self.m2_y / T::from_usize(self.n.max(1)).unwrap()
    }

    /// Population covariance of `y` and `g`.
    pub fn cov_yg(&self) -> T {
        self.c_yg / T::from_usize(self.n.max(1)).unwrap()
    }
}

/// Result of the closed-form fit, before and after clamping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTarget<T> {
    pub alpha_ls: T,
    pub beta_ls: T,
    pub alpha_raw: T,
    pub beta_raw: T,
    pub theta_tilde_star: UnconstrainedCalib<T>,
    pub n_valid: usize,
    /// Fewer than two valid pixels or a variance below the floor.
    pub degenerate: bool,
}

impl<T: Scalar> OracleTarget<T> {
    pub fn clamped(&self) -> ConstrainedCalib<T> {
        ConstrainedCalib::new(self.alpha_ls, self.beta_ls)
    }
}

/// Solves the affine fit from accumulated moments and clamps it.
pub fn fit_from_moments<T: Scalar>(m: &PairMoments<T>, bounds: &CalibBounds<T>) -> Result<OracleTarget<T>> {
    if m.n == 0 {
        return Err(Error::EmptyMask);
    }
    let var = m.var_y();
    let alpha_raw = m.cov_yg() / var.max(bounds.eps);
    let beta_raw = m.mean_g - alpha_raw * m.mean_y;
    if !alpha_raw.is_finite() || !beta_raw.is_finite() {
        return Err(Error::NonFinite("oracle fit"));
    }
    let target = OracleTarget {
        alpha_ls: alpha_raw.max(bounds.eps).min(bounds.alpha_max),
        beta_ls: beta_raw.max(bounds.beta_min).min(bounds.beta_max),
        alpha_raw,
        beta_raw,
        theta_tilde_star: UnconstrainedCalib::new(T::zero(), T::zero()),
        n_valid: m.n,
        degenerate: m.n < 2 || var < bounds.eps,
    };
    oracle_targets(target, bounds)
}

/// Least-squares `(alpha, beta)` minimizing the mean squared residual of
/// `alpha * Y + beta` against ground-truth inverse depth over valid pixels.
pub fn fit_oracle<T: Scalar>(y: &InverseDepthMap<T>, gt: &DepthMap<T>, bounds: &CalibBounds<T>) -> Result<OracleTarget<T>> {
    fit_from_moments(&PairMoments::from_maps(y, gt, bounds.eps)?, bounds)
}

/// Fills the unconstrained target from the clamped pair.
pub fn oracle_targets<T: Scalar>(mut target: OracleTarget<T>, bounds: &CalibBounds<T>) -> Result<OracleTarget<T>> {
    target.theta_tilde_star = unmap_params(target.clamped(), bounds)?;
    Ok(target)
}

/// Mean squared inverse-depth residual of an affine map over valid pixels.
pub fn masked_inverse_mse<T: Scalar>(y: &InverseDepthMap<T>, gt: &DepthMap<T>, alpha: T, beta: T, eps: T) -> Result<T> {
    y.check_shape(gt.height(), gt.width(), "residual inputs")?;
    let (mut sum, mut n) = (T::zero(), 0usize);
    for (&yv, &d) in y.values().iter().zip(gt.values()) {
        if d > T::zero() {
            let r = alpha * yv + beta - T::one() / d.max(eps);
            sum += r * r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / T::from_usize(n).unwrap())
}
