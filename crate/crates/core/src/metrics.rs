//! Standard metric-depth error and accuracy measures.

use serde::{Deserialize, Serialize};

use crate::calib::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixel rectangle `[top, bottom) x [left, right)` kept for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub clamp_predictions: bool,
    pub threshold_base: f64,
    #[serde(default)]
    pub crop: Option<Crop>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::indoor()
    }
}

impl EvalConfig {
    pub fn indoor() -> Self {
        Self { min_depth: 1e-3, max_depth: 10.0, clamp_predictions: true, threshold_base: 1.25, crop: None }
    }

    pub fn outdoor() -> Self {
        Self { max_depth: 80.0, ..Self::indoor() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::invalid("evaluation range", "need 0 < min_depth < max_depth"));
        }
        if !(self.threshold_base > 1.0) {
            return Err(Error::invalid("evaluation", "threshold base must exceed 1"));
        }
        Ok(())
    }
}

/// Error and accuracy measures for one image or averaged over many.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// Metrics over valid pixels whose ground truth lies in the configured range.
///
/// Threshold accuracy uses a strict `max(p/g, g/p) < base^k`.
pub fn compute_metrics<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    pred.check_shape(gt.height(), gt.width(), "metrics")?;
    let width = gt.width();
    let in_crop = |i: usize| match cfg.crop {
        None => true,
        Some(c) => {
            let (row, col) = (i / width, i % width);
            row >= c.top && row < c.bottom && col >= c.left && col < c.right
        }
    };
    let t1 = cfg.threshold_base;
    let (t2, t3) = (t1 * t1, t1 * t1 * t1);

    let (mut abs_rel, mut sq, mut sq_log, mut log10) = (0.0, 0.0, 0.0, 0.0);
    let (mut c1, mut c2, mut c3, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        let g = g.as_f64();
        if !(g > 0.0 && g >= cfg.min_depth && g <= cfg.max_depth) || !in_crop(i) {
            continue;
        }
        let mut p = p.as_f64();
        if cfg.clamp_predictions {
            p = p.max(cfg.min_depth).min(cfg.max_depth);
        }
        if !(p > 0.0) {
            return Err(Error::invalid("metrics", format!("non-positive prediction {p} at pixel {i}")));
        }
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        c1 += usize::from(ratio < t1);
        c2 += usize::from(ratio < t2);
        c3 += usize::from(ratio < t3);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        log10: log10 / nf,
        d1: c1 as f64 / nf,
        d2: c2 as f64 / nf,
        d3: c3 as f64 / nf,
        n_images: 1,
        n_pixels: n,
    })
}

/// Unweighted mean over images; counts are summed.
pub fn aggregate_metrics(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::invalid("aggregate", "no reports to aggregate"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        abs_rel: mean(|r| r.abs_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        log10: mean(|r| r.log10),
        d1: mean(|r| r.d1),
        d2: mean(|r| r.d2),
        d3: mean(|r| r.d3),
        n_images: reports.iter().map(|r| r.n_images).sum(),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
    })
}
