use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{recover_metric, CalibBounds, ConstrainedCalib};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_metrics, compute_metrics, EvalConfig, MetricsReport};
use crate::model::{CalibModel, ForwardMode};
use crate::oracle::{fit_from_moments, fit_oracle, OracleTarget, PairMoments};
use crate::scalar::Scalar;

/// Source of the calibration applied to each image.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a, T> {
    Model(&'a CalibModel<T>, ForwardMode),
    /// Per-image least-squares fit against ground truth; `unclamped` skips
    /// the bounds clamp.
    Oracle {
        unclamped: bool,
    },
    /// One calibration for every image.
    Global(ConstrainedCalib<T>),
}

impl<T> Predictor<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(..) => "model",
            Predictor::Oracle { unclamped: false } => "oracle",
            Predictor::Oracle { unclamped: true } => "oracle-unclamped",
            Predictor::Global(_) => "global",
        }
    }
}

/// One row of the per-image calibration table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_ls: f64,
    pub beta_ls: f64,
    pub abs_rel: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<ImageRow>,
    /// Images without any valid pixel in the evaluation range.
    pub skipped: Vec<String>,
}

fn calibrate<T: Scalar>(s: &Sample<T>, predictor: &Predictor<'_, T>, fit: &OracleTarget<T>) -> Result<ConstrainedCalib<T>> {
    Ok(match predictor {
        Predictor::Model(m, mode) => {
            let z = s.text.first().ok_or_else(|| Error::Manifest { record: s.id.clone(), msg: "no text embeddings".into() })?;
            if z.0.len() != m.text_dim() {
                return Err(Error::dims(format!("text embedding of {}", s.id), m.text_dim(), z.0.len()));
            }
            if s.feature.0.len() != m.feature_dim() {
                return Err(Error::dims(format!("feature of {}", s.id), m.feature_dim(), s.feature.0.len()));
            }
            m.predict(z, &s.feature, *mode)?.calib
        }
        Predictor::Oracle { unclamped: false } => fit.clamped(),
        Predictor::Oracle { unclamped: true } => ConstrainedCalib::new(fit.alpha_raw, fit.beta_raw),
        Predictor::Global(c) => *c,
    })
}

/// Deterministic per-image evaluation using each record's first caption.
pub fn evaluate<T: Scalar>(
    samples: &[Sample<T>],
    predictor: &Predictor<'_, T>,
    bounds: &CalibBounds<T>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let per_image: Vec<Option<(MetricsReport, ImageRow)>> = samples
        .par_iter()
        .map(|s| {
            let fit = match fit_oracle(&s.y, &s.gt, bounds) {
                Ok(f) => f,
                Err(Error::EmptyMask) => return Ok(None),
                Err(e) => return Err(e),
            };
            let calib = calibrate(s, predictor, &fit)?;
            let pred = recover_metric(&s.y, calib, bounds.eps);
            let m = match compute_metrics(&pred, &s.gt, cfg) {
                Ok(m) => m,
                Err(Error::EmptyMask) => return Ok(None),
                Err(e) => return Err(e),
            };
            let row = ImageRow {
                id: s.id.clone(),
                alpha: calib.alpha.as_f64(),
                beta: calib.beta.as_f64(),
                alpha_ls: fit.alpha_ls.as_f64(),
                beta_ls: fit.beta_ls.as_f64(),
                abs_rel: m.abs_rel,
                rmse: m.rmse,
            };
            Ok(Some((m, row)))
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for (s, r) in samples.iter().zip(per_image) {
        match r {
            Some((m, row)) => {
                reports.push(m);
                rows.push(row);
            }
            None => {
                warn!("sample {} has no valid pixels in range; skipped", s.id);
                skipped.push(s.id.clone());
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Evaluation { report: aggregate_metrics(&reports)?, rows, skipped })
}

/// Single affine fit over the union of valid pixels of every image,
/// clamped like the per-image fit.
pub fn fit_global_baseline<T: Scalar>(samples: &[Sample<T>], bounds: &CalibBounds<T>) -> Result<OracleTarget<T>> {
    let per_image: Vec<PairMoments<T>> =
        samples.par_iter().map(|s| PairMoments::from_maps(&s.y, &s.gt, bounds.eps)).collect::<Result<_>>()?;
    let mut pooled = PairMoments::new();
    for m in &per_image {
        pooled.merge(m);
    }
    fit_from_moments(&pooled, bounds)
}
