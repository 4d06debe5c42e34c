//! Scalar transforms, the constrained calibration mapping, envelope/offset
//! composition and metric depth recovery.
//!
//! Calibration lives in two spaces. The unconstrained pair `(alpha_tilde,
//! beta_tilde)` is what the heads predict; the constrained pair `(alpha,
//! beta)` is a positive scale and a bounded shift applied in inverse depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Above this argument `softplus_inv` switches to the `x + log(-expm1(-x))`
/// branch, where `expm1(x)` would lose relative precision or overflow.
const SOFTPLUS_INV_SWITCH: f64 = 20.0;

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`], defined for `y > 0`.
pub fn softplus_inv<T: Scalar>(y: T) -> Result<T> {
    if !(y > T::zero()) || !y.is_finite() {
        return Err(Error::Domain { op: "softplus_inv", value: y.as_f64() });
    }
    if y > T::lit(SOFTPLUS_INV_SWITCH) {
        Ok(y + (-(-y).exp_m1()).ln())
    } else {
        Ok(y.exp_m1().ln())
    }
}

/// Logistic sigmoid, evaluated on the non-overflowing side.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`sigmoid`], defined on the open unit interval.
pub fn logit<T: Scalar>(p: T) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::Domain { op: "logit", value: p.as_f64() });
    }
    Ok(p.ln() - (-p).ln_1p())
}

/// Fixed constants of the calibration parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct CalibBounds<T> {
    /// Lower bound on the inverse-depth shift (1/m).
    pub beta_min: T,
    /// Upper bound on the inverse-depth shift (1/m).
    pub beta_max: T,
    /// Upper clamp on the oracle scale.
    pub alpha_max: T,
    /// Shared numerical floor.
    pub eps: T,
    /// Cap on each envelope radius component.
    pub r_max: T,
}

impl<T: Scalar> Default for CalibBounds<T> {
    fn default() -> Self {
        Self { beta_min: T::zero(), beta_max: T::two(), alpha_max: T::lit(100.0), eps: T::lit(1e-6), r_max: T::lit(3.0) }
    }
}

impl<T: Scalar> CalibBounds<T> {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.beta_min, self.beta_max, self.alpha_max, self.eps, self.r_max].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("calibration bounds"));
        }
        if !(self.beta_min < self.beta_max) {
            return Err(Error::invalid("bounds", "beta_min must be below beta_max"));
        }
        if !(self.eps > T::zero() && self.eps < T::one()) {
            return Err(Error::invalid("bounds", "eps must lie in (0, 1)"));
        }
        if !(self.alpha_max > self.eps) {
            return Err(Error::invalid("bounds", "alpha_max must exceed eps"));
        }
        if !(self.r_max > T::zero()) {
            return Err(Error::invalid("bounds", "r_max must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn beta_span(&self) -> T {
        self.beta_max - self.beta_min
    }

    /// Casts every field to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CalibBounds<U> {
        CalibBounds {
            beta_min: U::lit(self.beta_min.as_f64()),
            beta_max: U::lit(self.beta_max.as_f64()),
            alpha_max: U::lit(self.alpha_max.as_f64()),
            eps: U::lit(self.eps.as_f64()),
            r_max: U::lit(self.r_max.as_f64()),
        }
    }
}

/// Calibration in the unconstrained space the heads predict in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedCalib<T> {
    pub alpha_tilde: T,
    pub beta_tilde: T,
}

impl<T: Scalar> UnconstrainedCalib<T> {
    pub fn new(alpha_tilde: T, beta_tilde: T) -> Self {
        Self { alpha_tilde, beta_tilde }
    }

    pub fn as_array(&self) -> [T; 2] {
        [self.alpha_tilde, self.beta_tilde]
    }

    pub fn from_array(v: [T; 2]) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.alpha_tilde.is_finite() && self.beta_tilde.is_finite()
    }
}

/// Positive scale and bounded shift applied in inverse depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedCalib<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> ConstrainedCalib<T> {
    pub fn new(alpha: T, beta: T) -> Self {
        Self { alpha, beta }
    }
}

/// Maps `(alpha_tilde, beta_tilde)` to `(softplus(alpha_tilde),
/// beta_min + span * sigmoid(beta_tilde))`.
pub fn map_params<T: Scalar>(theta: UnconstrainedCalib<T>, bounds: &CalibBounds<T>) -> Result<ConstrainedCalib<T>> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("unconstrained calibration"));
    }
    Ok(ConstrainedCalib { alpha: softplus(theta.alpha_tilde), beta: bounds.beta_min + bounds.beta_span() * sigmoid(theta.beta_tilde) })
}

/// Jacobian diagonal of [`map_params`]: `(d alpha / d alpha_tilde, d beta / d beta_tilde)`.
pub fn map_params_grad<T: Scalar>(theta: UnconstrainedCalib<T>, bounds: &CalibBounds<T>) -> [T; 2] {
    let sb = sigmoid(theta.beta_tilde);
    [sigmoid(theta.alpha_tilde), bounds.beta_span() * sb * (T::one() - sb)]
}

/// Inverse of [`map_params`], clamping the normalized shift into
/// `[eps, 1 - eps]` so the logit stays finite at the bounds.
pub fn unmap_params<T: Scalar>(calib: ConstrainedCalib<T>, bounds: &CalibBounds<T>) -> Result<UnconstrainedCalib<T>> {
    if !calib.beta.is_finite() {
        return Err(Error::NonFinite("constrained shift"));
    }
    let alpha_tilde = softplus_inv(calib.alpha)?;
    let p = ((calib.beta - bounds.beta_min) / bounds.beta_span()).max(bounds.eps).min(T::one() - bounds.eps);
    Ok(UnconstrainedCalib { alpha_tilde, beta_tilde: logit(p)? })
}

/// Language-predicted feasible box in unconstrained calibration space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub mu: [T; 2],
    pub r: [T; 2],
}

impl<T: Scalar> Envelope<T> {
    /// Checks `0 < r_k <= r_max` and finiteness.
    pub fn new(mu: [T; 2], r: [T; 2], r_max: T) -> Result<Self> {
        if !mu.iter().chain(r.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("envelope"));
        }
        if r.iter().any(|&rk| !(rk > T::zero() && rk <= r_max)) {
            return Err(Error::invalid("envelope", "radius must lie in (0, r_max]"));
        }
        Ok(Self { mu, r })
    }
}

/// Vision-predicted position inside the envelope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offset<T> {
    pub delta: [T; 2],
}

impl<T: Scalar> Offset<T> {
    pub fn new(delta: [T; 2]) -> Result<Self> {
        if delta.iter().any(|d| !(d.abs() <= T::one())) {
            return Err(Error::invalid("offset", "components must lie in [-1, 1]"));
        }
        Ok(Self { delta })
    }
}

/// `theta_tilde = mu + r * delta`, element-wise.
pub fn compose<T: Scalar>(env: &Envelope<T>, offset: &Offset<T>) -> UnconstrainedCalib<T> {
    UnconstrainedCalib { alpha_tilde: env.mu[0] + env.r[0] * offset.delta[0], beta_tilde: env.mu[1] + env.r[1] * offset.delta[1] }
}

/// Row-major `height x width` grid.
macro_rules! grid_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            height: usize,
            width: usize,
            values: Vec<T>,
        }

        impl<T: Scalar> $name<T> {
            pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
                if values.len() != height * width {
                    return Err(Error::dims(stringify!($name), height * width, values.len()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(stringify!($name)));
                }
                Ok(Self { height, width, values })
            }

            pub fn filled(height: usize, width: usize, value: T) -> Self {
                Self { height, width, values: vec![value; height * width] }
            }

            /// One-row grid, convenient for small cases.
            pub fn from_row(values: Vec<T>) -> Result<Self> {
                Self::new(1, values.len(), values)
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn values(&self) -> &[T] {
                &self.values
            }

            pub fn into_values(self) -> Vec<T> {
                self.values
            }

            pub fn check_shape(&self, other_h: usize, other_w: usize, what: &str) -> Result<()> {
                if self.height != other_h || self.width != other_w {
                    return Err(Error::dims(
                        format!("{what} ({}x{} vs {}x{})", self.height, self.width, other_h, other_w),
                        self.len(),
                        other_h * other_w,
                    ));
                }
                Ok(())
            }
        }
    };
}

grid_type!(
    /// Inverse relative depth predicted by a frozen backbone (unitless).
    InverseDepthMap
);
grid_type!(
    /// Metric depth in meters; non-positive entries are invalid pixels.
    DepthMap
);

/// Validity mask of a depth map: pixels with strictly positive depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

impl<T: Scalar> DepthMap<T> {
    pub fn mask(&self) -> Mask {
        Mask(self.values.iter().map(|&v| v > T::zero()).collect())
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.values[i] > T::zero()
    }

    pub fn n_valid(&self) -> usize {
        self.values.iter().filter(|&&v| v > T::zero()).count()
    }
}

/// Per-pixel `1 / max(alpha * y + beta, eps)` for an arbitrary affine pair.
///
/// Used directly when evaluating unclamped fits whose scale may be
/// non-positive.
pub fn recover_metric_affine<T: Scalar>(y: &InverseDepthMap<T>, alpha: T, beta: T, eps: T) -> DepthMap<T> {
    let values = y.values().iter().map(|&v| T::one() / (alpha * v + beta).max(eps)).collect();
    DepthMap { height: y.height(), width: y.width(), values }
}

/// Metric depth from inverse relative depth under a constrained calibration.
pub fn recover_metric<T: Scalar>(y: &InverseDepthMap<T>, calib: ConstrainedCalib<T>, eps: T) -> DepthMap<T> {
    recover_metric_affine(y, calib.alpha, calib.beta, eps)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;
    // ln(e - 1), 40-digit reference.
    const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

    fn bounds() -> CalibBounds<f64> {
        CalibBounds::default()
    }

    #[test]
    fn transform_reference_values() {
        assert_eq!(softplus(0.0), LN2);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(logit(0.5).unwrap(), 0.0);
        // log(1 + e^4), high-precision reference 4.018149927917809740...
        assert!((softplus(4.0f64) - 4.018_149_927_917_81).abs() < 1e-14);
        assert!((softplus_inv(1.0).unwrap() - SOFTPLUS_INV_ONE).abs() < 1e-15);
        // log(expm1(1e-6)), reference -13.815510057964232...
        assert!((softplus_inv(1e-6f64).unwrap() - (-13.815_510_057_964_232)).abs() < 1e-12);
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert_eq!(softplus(700.0), 700.0);
        assert!(softplus(-700.0) > 0.0);
        assert!(softplus(-700.0) < 1e-300);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(softplus_inv(0.0), Err(Error::Domain { .. })));
        assert!(matches!(softplus_inv(-1.0), Err(Error::Domain { .. })));
        assert!(softplus_inv(f64::NAN).is_err());
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!(logit(f64::NAN).is_err());
    }

    #[test]
    fn inverse_roundtrips_on_grid() {
        for i in 0..=600 {
            let x = -30.0 + 0.1 * i as f64;
            let back = softplus_inv(softplus(x)).unwrap();
            assert!((back - x).abs() < 1e-9, "softplus_inv at {x}: {back}");
            // sigmoid(x) near 1 keeps only ~e^-x of resolution.
            let back = logit(sigmoid(x)).unwrap();
            assert!((back - x).abs() < 1e-9 * x.exp().max(1.0), "logit at {x}: {back}");
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn softplus_monotone_convex_sigmoid_monotone() {
        let xs: Vec<f64> = (0..2001).map(|i| -50.0 + 0.05 * i as f64).collect();
        for w in xs.windows(3) {
            let (a, b, c) = (softplus(w[0]), softplus(w[1]), softplus(w[2]));
            assert!(a < b && b < c);
            assert!(b <= 0.5 * (a + c) + 4.0 * f64::EPSILON * c.abs().max(1.0));
            assert!(sigmoid(w[0]) <= sigmoid(w[1]));
        }
    }

    #[test]
    fn map_params_examples() {
        let c = map_params(UnconstrainedCalib::new(0.0, 0.0), &bounds()).unwrap();
        assert_eq!(c.alpha, LN2);
        assert_eq!(c.beta, 1.0);

        let c = map_params(UnconstrainedCalib::new(0.0, -800.0), &bounds()).unwrap();
        assert_eq!(c.beta, 0.0);

        let c = map_params(UnconstrainedCalib::new(SOFTPLUS_INV_ONE, 0.0), &bounds()).unwrap();
        assert!((c.alpha - 1.0).abs() < 1e-15);

        assert!(map_params(UnconstrainedCalib::new(f64::NAN, 0.0), &bounds()).is_err());
        assert!(map_params(UnconstrainedCalib::new(0.0, f64::INFINITY), &bounds()).is_err());
    }

    #[test]
    fn unmap_params_examples() {
        let t = unmap_params(ConstrainedCalib::new(1.0, 1.0), &bounds()).unwrap();
        assert!((t.alpha_tilde - SOFTPLUS_INV_ONE).abs() < 1e-15);
        assert_eq!(t.beta_tilde, 0.0);

        let t = unmap_params(ConstrainedCalib::new(1.0, 0.0), &bounds()).unwrap();
        assert!(t.beta_tilde.is_finite());
        assert!((t.beta_tilde - logit(1e-6).unwrap()).abs() < 1e-15);

        let theta = UnconstrainedCalib::new(3.0, -2.0);
        let back = unmap_params(map_params(theta, &bounds()).unwrap(), &bounds()).unwrap();
        assert!((back.alpha_tilde - 3.0).abs() < 1e-6);
        assert!((back.beta_tilde + 2.0).abs() < 1e-6);

        assert!(unmap_params(ConstrainedCalib::new(0.0, 1.0), &bounds()).is_err());
        assert!(unmap_params(ConstrainedCalib::new(-1.0, 1.0), &bounds()).is_err());
    }

    #[test]
    fn compose_examples() {
        let env: Envelope<f64> = Envelope { mu: [0.5, -0.2], r: [1.0, 0.5] };
        let t = compose(&env, &Offset::new([-1.0, 1.0]).unwrap());
        assert!((t.alpha_tilde + 0.5).abs() < 1e-15);
        assert!((t.beta_tilde - 0.3).abs() < 1e-15);

        let t = compose(&env, &Offset::new([0.0, 0.0]).unwrap());
        assert_eq!(t.as_array(), env.mu);

        let env = Envelope { mu: [1.0, 1.0], r: [2.0, 2.0] };
        let t = compose(&env, &Offset::new([0.5, -0.25]).unwrap());
        assert_eq!(t.as_array(), [2.0, 0.5]);
    }

    #[test]
    fn type_validation() {
        assert!(Offset::new([1.5, 0.0]).is_err());
        assert!(Envelope::new([0.0, 0.0], [0.0, 1.0], 3.0).is_err());
        assert!(Envelope::new([0.0, 0.0], [3.5, 1.0], 3.0).is_err());
        assert!(Envelope::new([0.0, 0.0], [3.0, 1.0], 3.0).is_ok());
        let mut b = bounds();
        b.beta_max = b.beta_min;
        assert!(b.validate().is_err());
        assert!(bounds().validate().is_ok());
        assert!(DepthMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(InverseDepthMap::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn recover_metric_examples() {
        let y = InverseDepthMap::filled(2, 2, 0.5);
        let d = recover_metric(&y, ConstrainedCalib::new(2.0, 0.0), 1e-6);
        assert!(d.values().iter().all(|&v| v == 1.0));

        let y = InverseDepthMap::filled(1, 3, 0.1f64);
        let d = recover_metric(&y, ConstrainedCalib::new(1.0, -0.5), 1e-6);
        assert!(d.values().iter().all(|&v| (v - 1e6).abs() < 1e-6));

        let y = InverseDepthMap::from_row(vec![0.2f64, 0.4]).unwrap();
        let d = recover_metric(&y, ConstrainedCalib::new(1.0, 0.1), 1e-6);
        assert!((d.values()[0] - 1.0 / 0.3).abs() < 1e-12);
        assert!((d.values()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_is_positive_set() {
        let d = DepthMap::from_row(vec![1.0, 0.0, -1.0, 2.0]).unwrap();
        assert_eq!(d.mask().as_slice(), &[true, false, false, true]);
        assert_eq!(d.n_valid(), 2);
    }

    proptest! {
        #[test]
        fn map_params_respects_bounds(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let bnd = bounds();
            let c = map_params(UnconstrainedCalib::new(a, b), &bnd).unwrap();
            prop_assert!(c.alpha > 0.0);
            prop_assert!(c.beta >= bnd.beta_min && c.beta <= bnd.beta_max);
            // Strictly interior wherever f64 can still represent it.
            if b.abs() <= 30.0 {
                prop_assert!(c.beta > bnd.beta_min && c.beta < bnd.beta_max);
            }
        }

        #[test]
        fn unmap_inverts_map_away_from_bounds(alpha in 1e-3f64..50.0, p in 1e-5f64..(1.0 - 1e-5)) {
            let bnd = bounds();
            let calib = ConstrainedCalib::new(alpha, bnd.beta_min + p * bnd.beta_span());
            let back = map_params(unmap_params(calib, &bnd).unwrap(), &bnd).unwrap();
            prop_assert!((back.alpha - calib.alpha).abs() <= 1e-6 * calib.alpha.max(1.0));
            prop_assert!((back.beta - calib.beta).abs() <= 1e-6);
        }

        #[test]
        fn boundary_offsets_hit_envelope_ends(
            mu0 in -5.0f64..5.0, mu1 in -5.0f64..5.0, r0 in 1e-3f64..3.0, r1 in 1e-3f64..3.0,
        ) {
            let env = Envelope::new([mu0, mu1], [r0, r1], 3.0).unwrap();
            let hi = compose(&env, &Offset::new([1.0, 1.0]).unwrap());
            let lo = compose(&env, &Offset::new([-1.0, -1.0]).unwrap());
            prop_assert_eq!(hi.as_array(), [mu0 + r0, mu1 + r1]);
            prop_assert_eq!(lo.as_array(), [mu0 - r0, mu1 - r1]);
        }

        #[test]
        fn planted_affine_is_reconstructed(
            a in 0.1f64..10.0, b in 0.0f64..2.0, ys in proptest::collection::vec(0.0f64..1.0, 1..64),
        ) {
            prop_assume!(ys.iter().all(|&y| a * y + b >= 1e-6));
            let y = InverseDepthMap::from_row(ys.clone()).unwrap();
            let d = recover_metric(&y, ConstrainedCalib::new(a, b), 1e-6);
            for (&yv, &dv) in ys.iter().zip(d.values()) {
                let gt = 1.0 / (a * yv + b);
                prop_assert!(((dv - gt) / gt).abs() <= 1e-9);
                prop_assert!(dv > 0.0 && dv <= 1e6);
            }
        }
    }
}
