use crate::scalar::Scalar;

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
///
/// Both endpoints are returned exactly; steps past `total` stay at `lr_min`.
pub fn cosine_lr<T: Scalar>(step: usize, total: usize, lr_max: T, lr_min: T) -> T {
    if step == 0 {
        return lr_max;
    }
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = T::from_usize(step).unwrap() / T::from_usize(total).unwrap();
    lr_min + T::half() * (lr_max - lr_min) * (T::one() + (T::PI() * frac).cos())
}
