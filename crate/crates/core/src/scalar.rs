//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Training and verification run in `f64`; `f32` is accepted for inference
/// and for cheap experiments.
pub trait Scalar: Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static {
    /// Converts an `f64` literal, panicking only if the target type cannot
    /// represent finite literals at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
}

/// Sign with a zero subgradient at exactly zero.
#[inline]
pub fn sign0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Running mean/variance with exact behaviour on repeated values.
///
/// Welford updates keep the mean bit-identical to the input when every
/// sample is the same value, so constant sequences report a standard
/// deviation of exactly zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningStats<T> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new() -> Self {
        Self { n: 0, mean: T::zero(), m2: T::zero() }
    }

    pub fn push(&mut self, x: T) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / T::from_usize(self.n).unwrap();
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> T {
        if self.n == 0 {
            return T::zero();
        }
        (self.m2 / T::from_usize(self.n).unwrap()).max(T::zero()).sqrt()
    }
}

impl<T: Scalar> FromIterator<T> for RunningStats<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}
