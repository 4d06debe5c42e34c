use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calib::{CalibBounds, DepthMap, InverseDepthMap};
use crate::data::synth::cosine_field;
use crate::error::Result;
use crate::heads::{HeadArch, PooledFeature, TextEmbedding};
use crate::losses::{unified_loss, LossWeights};
use crate::model::CalibModel;
use crate::neural::{grad_check, GradCheckReport, Parameters};
use crate::oracle::fit_oracle;

/// Finite-difference step of the pipeline check.
pub const PIPELINE_STEP: f64 = 1e-5;
pub const PIPELINE_TOL: f64 = 1e-4;

/// Checks the unified-loss gradient of a small freshly seeded model on one
/// random planted image, over every parameter of both heads.
pub fn pipeline_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let (h, w, text_dim, feature_dim) = (12, 12, 8, 6);
    let arch = HeadArch { hidden: 16, trunk_layers: 3, selector_layers: 3 };
    let bounds = CalibBounds::default();
    let model = CalibModel::init(text_dim, feature_dim, &arch, bounds, seed)?;

    let y = cosine_field(&mut rng, h, w, 3);
    let alpha = rng.random_range(0.5..2.0);
    let beta = rng.random_range(0.2..1.5);
    let gt: Vec<f64> = y
        .iter()
        .map(|&v| {
            let noise: f64 = rng.sample(StandardNormal);
            if rng.random::<f64>() < 0.1 {
                0.0
            } else {
                1.0 / ((alpha * v + beta) * (0.05 * noise).exp())
            }
        })
        .collect();
    let z = TextEmbedding((0..text_dim).map(|_| rng.sample(StandardNormal)).collect());
    let s = PooledFeature((0..feature_dim).map(|_| rng.sample(StandardNormal)).collect());
    let y = InverseDepthMap::new(h, w, y)?;
    let gt = DepthMap::new(h, w, gt)?;
    let target = fit_oracle(&y, &gt, &bounds)?;
    let weights = LossWeights::default();

    let fwd = model.forward(&z, &s, &y)?;
    let (_, grads) = unified_loss(&model, &fwd, &y, &gt, &target, &weights)?;
    let mut probe = model.clone();
    grad_check(&model.flat_params(), &grads.flat(), PIPELINE_STEP, PIPELINE_TOL, |p| {
        probe.set_flat_params(p)?;
        let f = probe.forward(&z, &s, &y)?;
        Ok(unified_loss(&probe, &f, &y, &gt, &target, &weights)?.0.total)
    })
}
