use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps_opt: T,
    pub weight_decay: T,
    pub lr_max: T,
    pub lr_min: T,
    /// Horizon of the cosine schedule, in optimizer steps.
    pub total_steps: usize,
}

impl<T: Scalar> Default for OptimHyper<T> {
    fn default() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps_opt: T::lit(1e-8),
            weight_decay: T::lit(0.01),
            lr_max: T::lit(3e-5),
            lr_min: T::lit(1e-5),
            total_steps: 1,
        }
    }
}

impl<T: Scalar> OptimHyper<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b > T::zero() && b < T::one();
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid("optimizer", "moment decay rates must lie in (0, 1)"));
        }
        if !(self.eps_opt > T::zero()) || !(self.weight_decay >= T::zero()) {
            return Err(Error::invalid("optimizer", "eps_opt must be positive and weight_decay non-negative"));
        }
        if !(self.lr_min <= self.lr_max) || !(self.lr_min >= T::zero()) {
            return Err(Error::invalid("optimizer", "need 0 <= lr_min <= lr_max"));
        }
        Ok(())
    }
}

/// First/second moment buffers and step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn zeros_like(params: &[&[T]]) -> Self {
        let z: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn check_shapes(&self, params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims("gradient groups", params.len(), grads.len()));
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::dims("optimizer state groups", params.len(), self.m.len()));
        }
        for (i, p) in params.iter().enumerate() {
            for (what, n) in [("gradient", grads[i].len()), ("first moment", self.m[i].len()), ("second moment", self.v[i].len())] {
                if n != p.len() {
                    return Err(Error::dims(format!("{what} group {i}"), p.len(), n));
                }
            }
        }
        Ok(())
    }
}

/// One AdamW update with decoupled weight decay:
/// `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)`.
///
/// A fresh (empty) state is sized from `params` on first use.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamWState<T>,
    hyper: &OptimHyper<T>,
    lr: T,
) -> Result<()> {
    if state.t == 0 && state.m.is_empty() {
        let shapes: Vec<&[T]> = params.iter().map(|p| &**p).collect();
        *state = AdamWState::zeros_like(&shapes);
    }
    state.check_shapes(params, grads)?;
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = T::one() - hyper.beta1.powi(t);
    let bc2 = T::one() - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + hyper.eps_opt) + hyper.weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> OptimHyper<f64> {
        OptimHyper { weight_decay: wd, ..OptimHyper::default() }
    }

    fn step1(w: f64, g: f64, wd: f64) -> f64 {
        let mut p = vec![w];
        let mut state = AdamWState::new();
        adamw_step(&mut [p.as_mut_slice()], &[&[g]], &mut state, &hyper(wd), 0.1).unwrap();
        assert_eq!(state.t, 1);
        p[0]
    }

    #[test]
    fn hand_evaluated_updates() {
        // m_hat = v_hat = 1 after one step, so the update is lr / (1 + 1e-8).
        assert!((step1(1.0, 1.0, 0.0) - 0.9).abs() < 1e-8);
        assert!((step1(1.0, 1.0, 0.1) - 0.89).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![0.3, -1.7, 2.5];
        let orig = p.clone();
        let mut state = AdamWState::new();
        for _ in 0..50 {
            adamw_step(&mut [p.as_mut_slice()], &[&[0.0; 3]], &mut state, &hyper(0.0), 0.1).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(state.t, 50);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut state = AdamWState::new();
        let err = adamw_step(&mut [p.as_mut_slice()], &[&[0.0; 2]], &mut state, &hyper(0.0), 0.1);
        assert!(err.is_err());
        let mut q = vec![0.0; 4];
        adamw_step(&mut [p.as_mut_slice()], &[&[0.0; 3]], &mut state, &hyper(0.0), 0.1).unwrap();
        assert!(adamw_step(&mut [q.as_mut_slice()], &[&[0.0; 4]], &mut state, &hyper(0.0), 0.1).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(OptimHyper::<f64>::default().validate().is_ok());
        assert!(OptimHyper { beta1: 1.0, ..OptimHyper::<f64>::default() }.validate().is_err());
        assert!(OptimHyper { lr_min: 1.0, ..OptimHyper::<f64>::default() }.validate().is_err());
    }
}
