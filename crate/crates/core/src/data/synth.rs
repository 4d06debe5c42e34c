//! Synthetic datasets with planted calibrations.
//!
//! Every sample draws a family, a true `(alpha*, beta*)` pair, a smooth
//! relative inverse-depth field `Y` and metric ground truth
//! `1 / (alpha* Y + beta*)`. Text embeddings are noisy copies of a family
//! prototype; pooled features linearly encode `ln alpha*` and `beta*` so the
//! selector can resolve the within-family residual.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, Manifest, ManifestHeader, SampleRecord};
use super::npy::{write_npy, Dtype};
use crate::calib::CalibBounds;
use crate::error::{Error, Result};
use crate::heads::PYRAMID_LEVELS;

/// Channel counts of a four-level backbone pyramid used by `--paper-dims`.
pub const FULL_LEVEL_CHANNELS: [usize; 4] = [48, 96, 192, 384];
pub const FULL_TEXT_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    /// Center of `ln alpha*`.
    pub log_alpha_center: f64,
    /// `ln alpha*` is uniform on `center +- halfwidth`.
    pub log_alpha_halfwidth: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl FamilySpec {
    fn new(name: &str, log_alpha_center: f64, log_alpha_halfwidth: f64, beta_lo: f64, beta_hi: f64) -> Self {
        Self { name: name.into(), log_alpha_center, log_alpha_halfwidth, beta_lo, beta_hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset: String,
    pub n_samples: usize,
    /// Extra samples written to a separate held-out manifest.
    pub n_holdout: usize,
    pub height: usize,
    pub width: usize,
    pub families: Vec<FamilySpec>,
    /// Multiplicative inverse-depth noise, `exp(sigma_n * xi)`.
    pub sigma_n: f64,
    pub sigma_t: f64,
    pub sigma_f: f64,
    pub text_dim: usize,
    pub feature_dim: usize,
    pub captions_per_sample: usize,
    /// Nuisance coordinates mixed into the features.
    pub nuisance_dim: usize,
    /// Standard deviation of each nuisance coordinate.
    pub nuisance_scale: f64,
    /// Standard deviation of the mixing matrix entries.
    pub feature_gain: f64,
    pub invalid_fraction: f64,
    pub n_waves: usize,
    pub seed: u64,
    pub bounds: CalibBounds<f64>,
    /// When set, features are written as one constant `C x s x s` map per
    /// pyramid level instead of a pooled vector; the sum must equal
    /// `feature_dim`.
    pub level_channels: Option<Vec<usize>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            n_samples: 64,
            n_holdout: 0,
            height: 64,
            width: 64,
            families: vec![
                FamilySpec::new("indoor-near", 0.4, 0.08, 1.02, 1.18),
                FamilySpec::new("indoor-far", -0.2, 0.08, 0.59, 0.71),
                FamilySpec::new("outdoor", -0.6, 0.08, 0.31, 0.39),
            ],
            sigma_n: 0.0,
            sigma_t: 0.1,
            sigma_f: 0.1,
            text_dim: 32,
            feature_dim: 16,
            captions_per_sample: 15,
            nuisance_dim: 2,
            nuisance_scale: 0.05,
            feature_gain: 4.0,
            invalid_fraction: 0.05,
            n_waves: 4,
            seed: 0,
            bounds: CalibBounds::default(),
            level_channels: None,
        }
    }
}

impl SynthConfig {
    /// Switches to realistic text and pyramid widths.
    pub fn with_full_dims(mut self) -> Self {
        self.text_dim = FULL_TEXT_DIM;
        self.feature_dim = FULL_LEVEL_CHANNELS.iter().sum();
        self.level_channels = Some(FULL_LEVEL_CHANNELS.to_vec());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid { what: "synthetic config", msg });
        self.bounds.validate()?;
        if self.height < 2 || self.width < 2 {
            return bad(format!("image size {}x{} is below 2x2", self.height, self.width));
        }
        if self.families.is_empty() {
            return bad("need at least one family".into());
        }
        if self.n_samples == 0 || self.captions_per_sample == 0 || self.text_dim == 0 || self.feature_dim == 0 || self.n_waves == 0 {
            return bad("sample, caption, wave and dimension counts must be positive".into());
        }
        let noises = [self.sigma_n, self.sigma_t, self.sigma_f, self.feature_gain, self.nuisance_scale];
        if noises.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise levels and gain must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) {
            return bad("invalid_fraction must lie in [0, 1)".into());
        }
        if let Some(ch) = &self.level_channels {
            if ch.len() != PYRAMID_LEVELS || ch.contains(&0) || ch.iter().sum::<usize>() != self.feature_dim {
                return bad(format!("level_channels {ch:?} must be {PYRAMID_LEVELS} positive counts summing to feature_dim"));
            }
        }
        let b = &self.bounds;
        for f in &self.families {
            let (lo, hi) = ((f.log_alpha_center - f.log_alpha_halfwidth).exp(), (f.log_alpha_center + f.log_alpha_halfwidth).exp());
            if !(f.log_alpha_halfwidth >= 0.0 && lo > b.eps && hi <= b.alpha_max) {
                return bad(format!("family {}: scale range [{lo}, {hi}] outside (eps, alpha_max]", f.name));
            }
            if !(b.beta_min < f.beta_lo && f.beta_lo <= f.beta_hi && f.beta_hi < b.beta_max) {
                return bad(format!(
                    "family {}: shift range [{}, {}] not inside ({}, {})",
                    f.name, f.beta_lo, f.beta_hi, b.beta_min, b.beta_max
                ));
            }
        }
        Ok(())
    }
}

/// Planted parameters of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub alpha_star: f64,
    pub beta_star: f64,
    pub family: usize,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub holdout_path: Option<PathBuf>,
    pub truth_path: PathBuf,
    pub truth: Vec<TruthRecord>,
}

/// Prototypes and mixing matrix shared by every sample.
struct World {
    prototypes: Vec<Vec<f64>>,
    /// `feature_dim x (2 + nuisance_dim)`, row-major.
    mixing: Vec<f64>,
    /// Mean family center of `(ln alpha, beta)`, subtracted before mixing so
    /// the features carry no large common offset.
    center: [f64; 2],
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream(cfg.seed, 0);
        let prototypes = cfg
            .families
            .iter()
            .map(|_| {
                let mut p = normal_vec(&mut rng, cfg.text_dim);
                normalize(&mut p);
                p
            })
            .collect();
        let cols = 2 + cfg.nuisance_dim;
        let mixing = normal_vec(&mut rng, cfg.feature_dim * cols).into_iter().map(|v| v * cfg.feature_gain).collect();
        let n = cfg.families.len() as f64;
        let center = [
            cfg.families.iter().map(|f| f.log_alpha_center).sum::<f64>() / n,
            cfg.families.iter().map(|f| 0.5 * (f.beta_lo + f.beta_hi)).sum::<f64>() / n,
        ];
        Self { prototypes, mixing, center }
    }
}

/// Smooth field in `[0.05, 1]` from a sum of random plane cosines.
pub fn cosine_field<R: Rng>(rng: &mut R, height: usize, width: usize, n_waves: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..n_waves)
        .map(|_| {
            let amp = rng.random_range(0.5..1.0);
            let kx = rng.random_range(-3.0..3.0);
            let ky = rng.random_range(-3.0..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            [amp, kx, ky, phase]
        })
        .collect();
    let mut f: Vec<f64> = (0..height * width)
        .map(|i| {
            let (v, u) = ((i / width) as f64 / height as f64, (i % width) as f64 / width as f64);
            waves.iter().map(|[a, kx, ky, ph]| a * (std::f64::consts::TAU * (kx * u + ky * v) + ph).cos()).sum()
        })
        .collect();
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in &mut f {
        *x = if hi > lo { 0.05 + 0.95 * (*x - lo) / (hi - lo) } else { 0.5 };
    }
    f
}

struct Generated {
    record: SampleRecord,
    truth: TruthRecord,
}

fn generate_one(cfg: &SynthConfig, world: &World, out: &Path, id: String, stream_id: u64) -> Result<Generated> {
    let mut rng = stream(cfg.seed, stream_id);
    let family = rng.random_range(0..cfg.families.len());
    let fam = &cfg.families[family];
    let ln_alpha = if fam.log_alpha_halfwidth > 0.0 {
        rng.random_range(fam.log_alpha_center - fam.log_alpha_halfwidth..=fam.log_alpha_center + fam.log_alpha_halfwidth)
    } else {
        fam.log_alpha_center
    };
    let alpha = ln_alpha.exp();
    let beta = if fam.beta_hi > fam.beta_lo { rng.random_range(fam.beta_lo..=fam.beta_hi) } else { fam.beta_lo };

    let (h, w) = (cfg.height, cfg.width);
    let y = cosine_field(&mut rng, h, w, cfg.n_waves);
    let mut gt: Vec<f64> = y
        .iter()
        .map(|&yv| {
            let noise = if cfg.sigma_n > 0.0 { (cfg.sigma_n * rng.sample::<f64, _>(StandardNormal)).exp() } else { 1.0 };
            1.0 / ((alpha * yv + beta) * noise)
        })
        .collect();
    let n_invalid = (cfg.invalid_fraction * (h * w) as f64).floor() as usize;
    for i in sample_indices(&mut rng, h * w, n_invalid) {
        gt[i] = 0.0;
    }

    // Noise has unit expected norm so sigma_t is relative to the unit prototype.
    let text_noise = cfg.sigma_t / (cfg.text_dim as f64).sqrt();
    let texts: Vec<Vec<f64>> = (0..cfg.captions_per_sample)
        .map(|_| {
            let mut t: Vec<f64> = world.prototypes[family].iter().map(|&p| p + text_noise * rng.sample::<f64, _>(StandardNormal)).collect();
            normalize(&mut t);
            t
        })
        .collect();

    let mut latent = vec![ln_alpha - world.center[0], beta - world.center[1]];
    latent.extend(normal_vec(&mut rng, cfg.nuisance_dim).into_iter().map(|v| v * cfg.nuisance_scale));
    let feat: Vec<f64> = world
        .mixing
        .chunks_exact(latent.len())
        .map(|row| row.iter().zip(&latent).map(|(a, v)| a * v).sum::<f64>() + cfg.sigma_f * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let rel = |suffix: &str| format!("data/{id}.{suffix}.npy");
    let put = |name: &str, shape: &[usize], data: &[f64]| write_npy(out.join(name), shape, data, Dtype::F8);
    let record = SampleRecord {
        id: id.clone(),
        y_path: rel("y"),
        gt_path: rel("gt"),
        text_emb_paths: (0..texts.len()).map(|k| rel(&format!("text{k:02}"))).collect(),
        feat_path: cfg.level_channels.is_none().then(|| rel("feat")),
        feat_level_paths: cfg.level_channels.as_ref().map(|ch| (0..ch.len()).map(|l| rel(&format!("feat.l{l}"))).collect()),
        captions: None,
    };
    put(&record.y_path, &[h, w], &y)?;
    put(&record.gt_path, &[h, w], &gt)?;
    for (p, t) in record.text_emb_paths.iter().zip(&texts) {
        put(p, &[cfg.text_dim], t)?;
    }
    match (&record.feat_path, &record.feat_level_paths, &cfg.level_channels) {
        (Some(p), _, _) => put(p, &[cfg.feature_dim], &feat)?,
        (None, Some(paths), Some(ch)) => {
            let mut offset = 0;
            for (l, (p, &c)) in paths.iter().zip(ch).enumerate() {
                let side = 1usize << (PYRAMID_LEVELS - 1 - l);
                let map: Vec<f64> = feat[offset..offset + c].iter().flat_map(|&v| std::iter::repeat_n(v, side * side)).collect();
                put(p, &[c, side, side], &map)?;
                offset += c;
            }
        }
        _ => unreachable!("feature layout follows level_channels"),
    }
    Ok(Generated { record, truth: TruthRecord { id, alpha_star: alpha, beta_star: beta, family } })
}

/// Writes `manifest.jsonl`, `holdout.jsonl` (when requested), `truth.jsonl`
/// and the tensor files under `out/data/`.
pub fn gen_synthetic(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out.join("data")).map_err(|e| Error::io(out, e))?;
    let world = World::new(cfg);

    let jobs: Vec<(String, u64)> = (0..cfg.n_samples)
        .map(|i| (format!("s{i:05}"), 1 + i as u64))
        .chain((0..cfg.n_holdout).map(|i| (format!("h{i:05}"), 1 + (cfg.n_samples + i) as u64)))
        .collect();
    let generated = jobs.into_par_iter().map(|(id, sid)| generate_one(cfg, &world, out, id, sid)).collect::<Result<Vec<_>>>()?;
    let (train, holdout) = generated.split_at(cfg.n_samples);

    let mut header = ManifestHeader::new(cfg.dataset.clone(), cfg.text_dim, cfg.feature_dim, true);
    header.level_channels = cfg.level_channels.clone();
    header.notes = Some(format!("synthetic seed {}", cfg.seed));
    let write = |name: &str, part: &[Generated]| -> Result<PathBuf> {
        let path = out.join(name);
        let m = Manifest { header: header.clone(), records: part.iter().map(|g| g.record.clone()).collect(), base_dir: out.to_path_buf() };
        save_manifest(&path, &m)?;
        Ok(path)
    };
    let manifest_path = write("manifest.jsonl", train)?;
    let holdout_path = if cfg.n_holdout > 0 { Some(write("holdout.jsonl", holdout)?) } else { None };

    let truth: Vec<TruthRecord> = generated.iter().map(|g| g.truth.clone()).collect();
    let truth_path = out.join("truth.jsonl");
    let mut buf = Vec::new();
    for t in &truth {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    fs::File::create(&truth_path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(&truth_path, e))?;
    Ok(SynthOutput { manifest_path, holdout_path, truth_path, truth })
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
