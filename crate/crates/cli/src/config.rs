//! Config file loading and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use depthcal::data::SynthConfig;
use depthcal::metrics::EvalConfig;
use depthcal::trainer::TrainConfig;
use depthcal::{CalibBounds, ForwardMode};

use crate::CliError;

/// Everything a run can be configured with. Top-level `bounds` is the single
/// source for the bounds used by synthesis, training and evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub bounds: CalibBounds<f64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    LanguageOnly,
    VisionOnly,
}

impl From<ModeArg> for ForwardMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => ForwardMode::Full,
            ModeArg::LanguageOnly => ForwardMode::LanguageOnly,
            ModeArg::VisionOnly => ForwardMode::VisionOnly,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_env: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub lambda_cal: Option<f64>,
    /// Composition trained; the single-head modes are ablations.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub min_depth: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct SynthArgs {
    /// Training samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Additional held-out samples written to holdout.jsonl.
    #[arg(long)]
    pub n_holdout: Option<usize>,
    #[arg(long)]
    pub sigma_n: Option<f64>,
    #[arg(long)]
    pub sigma_t: Option<f64>,
    #[arg(long)]
    pub sigma_f: Option<f64>,
    /// 512-wide text embeddings and four-level feature pyramids.
    #[arg(long)]
    pub paper_dims: bool,
}

fn set<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Loads the config file and applies every flag that was given.
    pub fn resolve(
        common: &CommonArgs,
        train: Option<&TrainArgs>,
        eval: Option<&EvalArgs>,
        synth: Option<&SynthArgs>,
    ) -> Result<Self, CliError> {
        let mut c = Self::load(common.config.as_deref())?;
        set(&mut c.bounds.beta_min, common.beta_min);
        set(&mut c.bounds.beta_max, common.beta_max);
        set(&mut c.bounds.alpha_max, common.alpha_max);
        set(&mut c.bounds.r_max, common.r_max);
        set(&mut c.train.seed, common.seed);
        set(&mut c.synth.seed, common.seed);
        if let Some(t) = train {
            set(&mut c.train.epochs, t.epochs);
            set(&mut c.train.batch_size, t.batch_size);
            set(&mut c.train.weights.lambda_env, t.lambda_env);
            set(&mut c.train.weights.lambda_r, t.lambda_r);
            set(&mut c.train.weights.lambda_cal, t.lambda_cal);
            set(&mut c.train.mode, t.mode.map(Into::into));
        }
        if let Some(e) = eval {
            set(&mut c.eval.min_depth, e.min_depth);
            set(&mut c.eval.max_depth, e.max_depth);
        }
        if let Some(s) = synth {
            set(&mut c.synth.n_samples, s.n);
            set(&mut c.synth.n_holdout, s.n_holdout);
            set(&mut c.synth.sigma_n, s.sigma_n);
            set(&mut c.synth.sigma_t, s.sigma_t);
            set(&mut c.synth.sigma_f, s.sigma_f);
            if s.paper_dims {
                c.synth = c.synth.clone().with_full_dims();
            }
        }
        c.train.bounds = c.bounds;
        c.synth.bounds = c.bounds;

        let usage = |e: depthcal::Error| CliError::Usage(e.to_string());
        c.bounds.validate().map_err(usage)?;
        if train.is_some() {
            c.train.validate().map_err(usage)?;
        }
        if eval.is_some() {
            c.eval.validate().map_err(usage)?;
        }
        if synth.is_some() {
            c.synth.validate().map_err(usage)?;
        }
        Ok(c)
    }
}
