//! The full calibration model: envelope and selector heads composed into a
//! metric depth prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{
    compose, map_params, recover_metric, CalibBounds, ConstrainedCalib, DepthMap, Envelope, InverseDepthMap, Offset, UnconstrainedCalib,
};
use crate::error::Result;
use crate::heads::{EnvelopeHead, EnvelopeTape, HeadArch, PooledFeature, SelectorHead, SelectorTape, TextEmbedding};
use crate::neural::Parameters;
use crate::scalar::Scalar;

/// How the unconstrained calibration is formed from the two heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    /// `mu + r * delta`.
    #[default]
    Full,
    /// The envelope center alone.
    LanguageOnly,
    /// The offset alone; the caption is ignored.
    VisionOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibModel<T> {
    pub envelope: EnvelopeHead<T>,
    pub selector: SelectorHead<T>,
    pub bounds: CalibBounds<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T> {
    pub envelope: Envelope<T>,
    pub offset: Offset<T>,
    pub theta: UnconstrainedCalib<T>,
    pub calib: ConstrainedCalib<T>,
}

/// Everything the reverse pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct PipelineForward<T> {
    pub prediction: Prediction<T>,
    pub depth: DepthMap<T>,
    pub mode: ForwardMode,
    pub(crate) env_tape: EnvelopeTape<T>,
    pub(crate) sel_tape: SelectorTape<T>,
}

impl<T: Scalar> CalibModel<T> {
    pub fn init(text_dim: usize, feature_dim: usize, arch: &HeadArch, bounds: CalibBounds<T>, seed: u64) -> Result<Self> {
        bounds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let envelope = EnvelopeHead::init_with_rng(&arch.trunk_dims(text_dim), bounds.r_max, &mut rng)?;
        let selector = SelectorHead::init_with_rng(&arch.selector_dims(feature_dim), &mut rng)?;
        Ok(Self { envelope, selector, bounds })
    }

    pub fn text_dim(&self) -> usize {
        self.envelope.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.selector.input_dim()
    }

    pub fn predict(&self, z: &TextEmbedding<T>, s: &PooledFeature<T>, mode: ForwardMode) -> Result<Prediction<T>> {
        let (envelope, _) = self.envelope.forward(z)?;
        let (offset, _) = self.selector.forward(s)?;
        let theta = match mode {
            ForwardMode::Full => compose(&envelope, &offset),
            ForwardMode::LanguageOnly => UnconstrainedCalib::from_array(envelope.mu),
            ForwardMode::VisionOnly => UnconstrainedCalib::from_array(offset.delta),
        };
        let calib = map_params(theta, &self.bounds)?;
        Ok(Prediction { envelope, offset, theta, calib })
    }

    /// Full-mode forward with tapes, through metric depth recovery.
    pub fn forward(&self, z: &TextEmbedding<T>, s: &PooledFeature<T>, y: &InverseDepthMap<T>) -> Result<PipelineForward<T>> {
        self.forward_mode(z, s, y, ForwardMode::Full)
    }

    pub fn forward_mode(
        &self,
        z: &TextEmbedding<T>,
        s: &PooledFeature<T>,
        y: &InverseDepthMap<T>,
        mode: ForwardMode,
    ) -> Result<PipelineForward<T>> {
        let (envelope, env_tape) = self.envelope.forward(z)?;
        let (offset, sel_tape) = self.selector.forward(s)?;
        let theta = match mode {
            ForwardMode::Full => compose(&envelope, &offset),
            ForwardMode::LanguageOnly => UnconstrainedCalib::from_array(envelope.mu),
            ForwardMode::VisionOnly => UnconstrainedCalib::from_array(offset.delta),
        };
        let calib = map_params(theta, &self.bounds)?;
        let depth = recover_metric(y, calib, self.bounds.eps);
        Ok(PipelineForward { prediction: Prediction { envelope, offset, theta, calib }, depth, mode, env_tape, sel_tape })
    }
}

impl<T: Scalar> Parameters<T> for CalibModel<T> {
    /// Envelope head parameters followed by selector parameters.
    fn param_slices(&self) -> Vec<&[T]> {
        let mut v = self.envelope.param_slices();
        v.extend(self.selector.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.envelope.param_slices_mut();
        v.extend(self.selector.param_slices_mut());
        v
    }
}
