//! Loss terms of the training objective and its reverse pass.
//!
//! Oracle targets enter every term as constants: no gradient is ever
//! propagated into them.

use serde::{Deserialize, Serialize};

use crate::calib::{map_params_grad, sigmoid, softplus, ConstrainedCalib, DepthMap, Envelope, InverseDepthMap, UnconstrainedCalib};
use crate::error::{Error, Result};
use crate::model::{CalibModel, ForwardMode, PipelineForward};
use crate::neural::Grads;
use crate::oracle::OracleTarget;
use crate::scalar::{sign0, Scalar};

/// Weights of the auxiliary terms. Zero disables a term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_env: f64,
    pub lambda_r: f64,
    pub lambda_cal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_env: 0.1, lambda_r: 1e-2, lambda_cal: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_env, self.lambda_r, self.lambda_cal].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok {
            return Err(Error::invalid("loss weights", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Depth term only.
    pub fn without_oracle() -> Self {
        Self { lambda_env: 0.0, lambda_r: 0.0, lambda_cal: 0.0 }
    }

    pub fn without_cal(self) -> Self {
        Self { lambda_cal: 0.0, ..self }
    }

    pub fn without_env(self) -> Self {
        Self { lambda_env: 0.0, lambda_r: 0.0, ..self }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth: f64,
    pub env: f64,
    pub radius: f64,
    pub cal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(depth: f64, env: f64, radius: f64, cal: f64, w: &LossWeights) -> Self {
        let total = depth + w.lambda_env * env + w.lambda_r * radius + w.lambda_cal * cal;
        Self { depth, env, radius, cal, total }
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self { depth: sum(|b| b.depth), env: sum(|b| b.env), radius: sum(|b| b.radius), cal: sum(|b| b.cal), total: sum(|b| b.total) }
    }
}

/// Mean absolute depth error over pixels with positive ground truth.
pub fn loss_depth<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<T> {
    pred.check_shape(gt.height(), gt.width(), "depth loss")?;
    let (mut sum, mut n) = (T::zero(), 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g > T::zero() {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / T::from_usize(n).unwrap())
}

/// `sum_k softplus(|target_k - mu_k| - r_k)`.
pub fn loss_env<T: Scalar>(target: &UnconstrainedCalib<T>, env: &Envelope<T>) -> T {
    let t = target.as_array();
    (0..2).fold(T::zero(), |acc, k| acc + softplus((t[k] - env.mu[k]).abs() - env.r[k]))
}

/// Gradients of [`loss_env`] with respect to `(mu, r)`.
pub fn loss_env_grad<T: Scalar>(target: &UnconstrainedCalib<T>, env: &Envelope<T>) -> ([T; 2], [T; 2]) {
    let t = target.as_array();
    let mut d_mu = [T::zero(); 2];
    let mut d_r = [T::zero(); 2];
    for k in 0..2 {
        let s = sigmoid((t[k] - env.mu[k]).abs() - env.r[k]);
        d_mu[k] = s * sign0(env.mu[k] - t[k]);
        d_r[k] = -s;
    }
    (d_mu, d_r)
}

/// L1 norm of the (positive) radius.
pub fn loss_radius<T: Scalar>(env: &Envelope<T>) -> T {
    env.r[0].abs() + env.r[1].abs()
}

/// `|alpha - alpha_ls| + |beta - beta_ls|` against the clamped oracle.
pub fn loss_cal<T: Scalar>(calib: &ConstrainedCalib<T>, target: &OracleTarget<T>) -> T {
    (calib.alpha - target.alpha_ls).abs() + (calib.beta - target.beta_ls).abs()
}

pub fn loss_cal_grad<T: Scalar>(calib: &ConstrainedCalib<T>, target: &OracleTarget<T>) -> [T; 2] {
    [sign0(calib.alpha - target.alpha_ls), sign0(calib.beta - target.beta_ls)]
}

/// Unified objective for one sample and its gradient with respect to every
/// model parameter (envelope head first, then selector).
pub fn unified_loss<T: Scalar>(
    model: &CalibModel<T>,
    fwd: &PipelineForward<T>,
    y: &InverseDepthMap<T>,
    gt: &DepthMap<T>,
    target: &OracleTarget<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Grads<T>)> {
    y.check_shape(gt.height(), gt.width(), "unified loss")?;
    let p = &fwd.prediction;
    let eps = model.bounds.eps;
    let (lam_env, lam_r, lam_cal) = (T::lit(weights.lambda_env), T::lit(weights.lambda_r), T::lit(weights.lambda_cal));

    let depth = loss_depth(&fwd.depth, gt)?;
    let env = loss_env(&target.theta_tilde_star, &p.envelope);
    let radius = loss_radius(&p.envelope);
    let cal = loss_cal(&p.calib, target);
    let breakdown = LossBreakdown::compose(depth.as_f64(), env.as_f64(), radius.as_f64(), cal.as_f64(), weights);

    // Depth term through D = 1 / max(alpha * y + beta, eps).
    let n_valid = T::from_usize(gt.n_valid()).unwrap();
    let (mut d_alpha, mut d_beta) = (T::zero(), T::zero());
    for ((&yv, &d_hat), &g) in y.values().iter().zip(fwd.depth.values()).zip(gt.values()) {
        if !(g > T::zero()) {
            continue;
        }
        let u = p.calib.alpha * yv + p.calib.beta;
        if u > eps {
            let dd = sign0(d_hat - g) / n_valid * (-d_hat * d_hat);
            d_alpha += dd * yv;
            d_beta += dd;
        }
    }
    let cal_grad = loss_cal_grad(&p.calib, target);
    d_alpha += lam_cal * cal_grad[0];
    d_beta += lam_cal * cal_grad[1];

    let jac = map_params_grad(p.theta, &model.bounds);
    let d_theta = [d_alpha * jac[0], d_beta * jac[1]];

    let (env_mu, env_r) = loss_env_grad(&target.theta_tilde_star, &p.envelope);
    let mut d_mu = [T::zero(); 2];
    let mut d_r = [T::zero(); 2];
    let mut d_delta = [T::zero(); 2];
    for k in 0..2 {
        d_mu[k] = lam_env * env_mu[k];
        d_r[k] = lam_env * env_r[k] + lam_r;
        match fwd.mode {
            ForwardMode::Full => {
                d_mu[k] += d_theta[k];
                d_r[k] += d_theta[k] * p.offset.delta[k];
                d_delta[k] = d_theta[k] * p.envelope.r[k];
            }
            ForwardMode::LanguageOnly => d_mu[k] += d_theta[k],
            ForwardMode::VisionOnly => d_delta[k] = d_theta[k],
        }
    }

    let (mut grads, _) = model.envelope.backward(&fwd.env_tape, d_mu, d_r)?;
    grads.extend(model.selector.backward(&fwd.sel_tape, d_delta)?);
    Ok((breakdown, grads))
}
