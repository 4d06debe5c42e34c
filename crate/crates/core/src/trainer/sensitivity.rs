use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{CalibModel, ForwardMode};
use crate::scalar::{RunningStats, Scalar};

/// Spread of the prediction for one image across its captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSensitivity {
    pub id: String,
    pub mean_ln_alpha: f64,
    pub std_ln_alpha: f64,
    pub mean_beta_tilde: f64,
    pub std_beta_tilde: f64,
}

/// Dataset-level numbers are means of the per-image statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub mode: ForwardMode,
    pub mean_ln_alpha: f64,
    pub std_ln_alpha: f64,
    pub mean_beta_tilde: f64,
    pub std_beta_tilde: f64,
    pub per_image: Vec<ImageSensitivity>,
}

/// Runs every caption of every image through the model with the image
/// features fixed and summarizes `ln alpha` and the unconstrained shift.
/// Standard deviations are population values over the captions.
pub fn caption_sensitivity<T: Scalar>(samples: &[Sample<T>], model: &CalibModel<T>, mode: ForwardMode) -> Result<SensitivityReport> {
    if samples.is_empty() {
        return Err(Error::invalid("caption sensitivity", "no samples"));
    }
    let per_image: Vec<ImageSensitivity> = samples
        .par_iter()
        .map(|s| {
            if s.text.len() < 2 {
                return Err(Error::Manifest { record: s.id.clone(), msg: format!("need at least 2 captions, found {}", s.text.len()) });
            }
            let mut ln_alpha = RunningStats::new();
            let mut beta_tilde = RunningStats::new();
            for z in &s.text {
                let p = model.predict(z, &s.feature, mode)?;
                ln_alpha.push(p.calib.alpha.ln().as_f64());
                beta_tilde.push(p.theta.beta_tilde.as_f64());
            }
            Ok(ImageSensitivity {
                id: s.id.clone(),
                mean_ln_alpha: ln_alpha.mean(),
                std_ln_alpha: ln_alpha.std(),
                mean_beta_tilde: beta_tilde.mean(),
                std_beta_tilde: beta_tilde.std(),
            })
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let avg = |f: fn(&ImageSensitivity) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(SensitivityReport {
        mode,
        mean_ln_alpha: avg(|r| r.mean_ln_alpha),
        std_ln_alpha: avg(|r| r.std_ln_alpha),
        mean_beta_tilde: avg(|r| r.mean_beta_tilde),
        std_beta_tilde: avg(|r| r.std_beta_tilde),
        per_image,
    })
}
