use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::CalibBounds;
use crate::data::{Manifest, Sample};
use crate::error::{Error, Result};
use crate::heads::HeadArch;
use crate::losses::{unified_loss, LossBreakdown, LossWeights};
use crate::metrics::EvalConfig;
use crate::model::{CalibModel, ForwardMode};
use crate::neural::{adamw_step, cosine_lr, AdamWState, Grads, OptimHyper, Parameters};
use crate::oracle::{fit_oracle, OracleTarget};
use crate::scalar::Scalar;

use super::eval::{evaluate, Predictor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSampling {
    /// One embedding drawn uniformly per sample and iteration.
    #[default]
    Uniform,
    /// Always the first embedding.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub bounds: CalibBounds<f64>,
    pub arch: HeadArch,
    pub seed: u64,
    pub caption_sampling: CaptionSampling,
    /// Composition used in the forward pass; the ablations train one head
    /// alone.
    pub mode: ForwardMode,
    /// Training-set abs_rel is logged every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr_max: 3e-5,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            bounds: CalibBounds::default(),
            arch: HeadArch::default(),
            seed: 0,
            caption_sampling: CaptionSampling::Uniform,
            mode: ForwardMode::Full,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("training config", "epochs and batch_size must be positive"));
        }
        if self.arch.hidden == 0 || self.arch.trunk_layers == 0 || self.arch.selector_layers == 0 {
            return Err(Error::invalid("training config", "architecture sizes must be positive"));
        }
        self.weights.validate()?;
        self.bounds.validate()?;
        self.optim::<f64>(1).validate()
    }

    pub fn optim<T: Scalar>(&self, total_steps: usize) -> OptimHyper<T> {
        OptimHyper {
            beta1: T::lit(self.beta1),
            beta2: T::lit(self.beta2),
            eps_opt: T::lit(self.adam_eps),
            weight_decay: T::lit(self.weight_decay),
            lr_max: T::lit(self.lr_max),
            lr_min: T::lit(self.lr_min),
            total_steps,
        }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over processed samples, measured before each update.
    pub loss: LossBreakdown,
    /// Learning rate used by every optimizer step of the epoch.
    pub lrs: Vec<f64>,
    pub processed: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_abs_rel: Option<f64>,
}

/// Trained heads with everything needed to resume or evaluate them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub dataset: String,
    pub text_dim: usize,
    pub feature_dim: usize,
    pub config: TrainConfig,
    pub model: CalibModel<T>,
    pub optimizer: AdamWState<T>,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Errors unless the manifest dims match the trained heads.
    pub fn check_compatible(&self, manifest: &Manifest) -> Result<()> {
        if manifest.header.text_dim != self.text_dim {
            return Err(Error::dims("manifest text_dim vs checkpoint", self.text_dim, manifest.header.text_dim));
        }
        if manifest.header.feature_dim != self.feature_dim {
            return Err(Error::dims("manifest feature_dim vs checkpoint", self.feature_dim, manifest.header.feature_dim));
        }
        Ok(())
    }
}

fn sample_grads<T: Scalar>(
    model: &CalibModel<T>,
    s: &Sample<T>,
    target: &OracleTarget<T>,
    caption: usize,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Grads<T>)> {
    let fwd = model.forward_mode(&s.text[caption], &s.feature, &s.y, cfg.mode)?;
    unified_loss(model, &fwd, &s.y, &s.gt, target, &cfg.weights)
}

/// Trains both heads on in-memory samples. Inputs are only read.
///
/// Per-sample work runs on the current rayon pool; gradients are reduced in
/// batch order, so the result does not depend on the thread count.
pub fn train_samples<T: Scalar>(samples: &[Sample<T>], dataset: &str, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::invalid("training set", "no samples"))?;
    let (text_dim, feature_dim) = (first.text.first().map_or(0, |t| t.0.len()), first.feature.0.len());
    for s in samples {
        if s.text.is_empty() {
            return Err(Error::Manifest { record: s.id.clone(), msg: "no text embeddings".into() });
        }
        if s.text.iter().any(|t| t.0.len() != text_dim) || s.feature.0.len() != feature_dim {
            return Err(Error::Manifest { record: s.id.clone(), msg: "embedding or feature width differs from the first record".into() });
        }
    }

    let bounds: CalibBounds<T> = cfg.bounds.cast();
    let mut model = CalibModel::init(text_dim, feature_dim, &cfg.arch, bounds, cfg.seed)?;
    let mut optimizer = AdamWState::new();

    // Targets depend only on the frozen inputs.
    let targets: Vec<Option<OracleTarget<T>>> = samples
        .par_iter()
        .map(|s| match fit_oracle(&s.y, &s.gt, &bounds) {
            Ok(t) => Ok(Some(t)),
            Err(Error::EmptyMask) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    for (s, t) in samples.iter().zip(&targets) {
        if t.is_none() {
            warn!("sample {} has no valid pixels and is skipped", s.id);
        }
    }

    let steps_per_epoch = cfg.steps_per_epoch(samples.len());
    let total_steps = cfg.epochs * steps_per_epoch;
    let hyper = cfg.optim::<T>(total_steps);
    let (lr_max, lr_min) = (T::lit(cfg.lr_max), T::lit(cfg.lr_min));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(samples.len());
        let mut lrs = Vec::with_capacity(steps_per_epoch);
        let mut skipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let captions: Vec<usize> = batch
                .iter()
                .map(|&i| match cfg.caption_sampling {
                    CaptionSampling::Uniform => rng.random_range(0..samples[i].text.len()),
                    CaptionSampling::First => 0,
                })
                .collect();
            let results: Vec<Option<(LossBreakdown, Grads<T>)>> = batch
                .par_iter()
                .zip(&captions)
                .map(|(&i, &k)| targets[i].as_ref().map(|t| sample_grads(&model, &samples[i], t, k, cfg)).transpose())
                .collect::<Result<_>>()?;

            let mut sum: Option<Grads<T>> = None;
            let mut n = 0usize;
            for r in results {
                match r {
                    None => skipped += 1,
                    Some((b, g)) => {
                        losses.push(b);
                        n += 1;
                        match &mut sum {
                            None => sum = Some(g),
                            Some(acc) => acc.add_assign(&g)?,
                        }
                    }
                }
            }
            let lr = cosine_lr(step, total_steps, lr_max, lr_min);
            lrs.push(lr.as_f64());
            if let Some(mut g) = sum {
                g.scale(T::one() / T::from_usize(n).unwrap());
                let mut params = model.param_slices_mut();
                adamw_step(&mut params, &g.slices(), &mut optimizer, &hyper, lr)?;
            }
            step += 1;
        }

        let train_abs_rel = if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            Some(evaluate(samples, &Predictor::Model(&model, cfg.mode), &bounds, &EvalConfig::outdoor())?.report.abs_rel)
        } else {
            None
        };
        let entry = EpochLog { epoch, loss: LossBreakdown::mean(&losses), lrs, processed: losses.len(), skipped, train_abs_rel };
        info!(
            "epoch {epoch}/{} total={:.6e} depth={:.6e} env={:.6e} radius={:.6e} cal={:.6e} lr={:.6e} skipped={}",
            cfg.epochs,
            entry.loss.total,
            entry.loss.depth,
            entry.loss.env,
            entry.loss.radius,
            entry.loss.cal,
            entry.lrs.last().copied().unwrap_or(0.0),
            entry.skipped
        );
        if !entry.loss.total.is_finite() && entry.processed > 0 {
            return Err(Error::NonFinite("training loss"));
        }
        log.push(entry);
    }

    Ok(Checkpoint { dataset: dataset.to_string(), text_dim, feature_dim, config: cfg.clone(), model, optimizer, log })
}

/// Loads a manifest's samples and trains on them.
pub fn train<T: Scalar>(manifest: &Manifest, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    let samples = manifest.load_samples::<T>()?;
    let ckpt = train_samples(&samples, &manifest.header.dataset, cfg)?;
    ckpt.check_compatible(manifest)?;
    Ok(ckpt)
}
