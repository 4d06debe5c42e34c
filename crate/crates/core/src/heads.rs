//! Caption-conditioned envelope head, vision-conditioned selector and
//! multi-scale feature pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{sigmoid, softplus, Envelope, Offset};
use crate::error::{Error, Result};
use crate::neural::{DenseLayer, Grads, Mlp, MlpTape, Parameters};
use crate::scalar::Scalar;

/// Number of pyramid levels the selector consumes.
pub const PYRAMID_LEVELS: usize = 4;

/// Frozen text-encoder output for one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T>(pub Vec<T>);

/// Concatenated globally pooled pyramid features.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature<T>(pub Vec<T>);

/// One `channels x height x width` feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map", "dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::dims("feature map", channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Per-channel spatial mean.
    pub fn global_average(&self) -> Vec<T> {
        let n = T::from_usize(self.height * self.width).unwrap();
        self.data.chunks_exact(self.height * self.width).map(|c| c.iter().fold(T::zero(), |a, &v| a + v) / n).collect()
    }
}

/// Backbone features at strides 4, 8, 16 and 32, either as maps or
/// already pooled per level.
#[derive(Clone, Debug, PartialEq)]
pub enum FeaturePyramid<T> {
    Maps(Vec<FeatureMap<T>>),
    Pooled(Vec<Vec<T>>),
}

/// Global average pooling per level, concatenated in level order.
pub fn pool_features<T: Scalar>(pyramid: &FeaturePyramid<T>) -> Result<PooledFeature<T>> {
    let levels: Vec<Vec<T>> = match pyramid {
        FeaturePyramid::Maps(maps) => {
            if maps.len() != PYRAMID_LEVELS {
                return Err(Error::dims("pyramid levels", PYRAMID_LEVELS, maps.len()));
            }
            maps.iter().map(FeatureMap::global_average).collect()
        }
        FeaturePyramid::Pooled(v) => {
            if v.len() != PYRAMID_LEVELS {
                return Err(Error::dims("pyramid levels", PYRAMID_LEVELS, v.len()));
            }
            if v.iter().any(Vec::is_empty) {
                return Err(Error::invalid("pyramid", "every level needs at least one channel"));
            }
            v.clone()
        }
    };
    let s = levels.concat();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pooled feature"));
    }
    Ok(PooledFeature(s))
}

/// Trunk MLP followed by linear center and softplus radius heads.
///
/// The trunk output is rectified before the two heads; the radius is
/// hard-clamped at `r_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeHead<T> {
    pub trunk: Mlp<T>,
    pub head_mu: DenseLayer<T>,
    pub head_r: DenseLayer<T>,
    pub r_max: T,
}

#[derive(Clone, Debug)]
pub struct EnvelopeTape<T> {
    trunk: MlpTape<T>,
    trunk_out: Vec<T>,
    h: Vec<T>,
    r_logits: [T; 2],
    clamped: [bool; 2],
}

impl<T: Scalar> EnvelopeTape<T> {
    pub fn r_logits(&self) -> [T; 2] {
        self.r_logits
    }

    pub fn clamped(&self) -> [bool; 2] {
        self.clamped
    }
}

impl<T: Scalar> EnvelopeHead<T> {
    pub fn new(trunk: Mlp<T>, head_mu: DenseLayer<T>, head_r: DenseLayer<T>, r_max: T) -> Result<Self> {
        let width = trunk.output_dim();
        for (name, head) in [("mu head", &head_mu), ("r head", &head_r)] {
            if head.in_dim() != width {
                return Err(Error::dims(name, width, head.in_dim()));
            }
            if head.out_dim() != 2 {
                return Err(Error::dims(name, 2, head.out_dim()));
            }
        }
        if !(r_max > T::zero()) {
            return Err(Error::invalid("envelope head", "r_max must be positive"));
        }
        Ok(Self { trunk, head_mu, head_r, r_max })
    }

    /// Trunk over `trunk_dims` (input first), heads from the last width to 2.
    pub fn init_with_rng<R: Rng>(trunk_dims: &[usize], r_max: T, rng: &mut R) -> Result<Self> {
        let trunk = Mlp::init_with_rng(trunk_dims, rng)?;
        let width = trunk.output_dim();
        let head_mu = DenseLayer::init_with_rng(width, 2, rng);
        let head_r = DenseLayer::init_with_rng(width, 2, rng);
        Self::new(trunk, head_mu, head_r, r_max)
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn forward(&self, z: &TextEmbedding<T>) -> Result<(Envelope<T>, EnvelopeTape<T>)> {
        let (trunk_out, trunk) = self.trunk.forward(&z.0)?;
        let h: Vec<T> = trunk_out.iter().map(|&v| v.max(T::zero())).collect();
        let mu = self.head_mu.forward(&h)?;
        let logits = self.head_r.forward(&h)?;
        let mut r = [T::zero(); 2];
        let mut clamped = [false; 2];
        for k in 0..2 {
            let sp = softplus(logits[k]);
            clamped[k] = sp >= self.r_max;
            r[k] = sp.min(self.r_max);
        }
        let env = Envelope { mu: [mu[0], mu[1]], r };
        Ok((env, EnvelopeTape { trunk, trunk_out, h, r_logits: [logits[0], logits[1]], clamped }))
    }

    /// Gradients of `mu . d_mu + r . d_r` in parameter order, plus the
    /// gradient with respect to the embedding.
    pub fn backward(&self, tape: &EnvelopeTape<T>, d_mu: [T; 2], d_r: [T; 2]) -> Result<(Grads<T>, Vec<T>)> {
        let d_logits: Vec<T> = (0..2).map(|k| if tape.clamped[k] { T::zero() } else { d_r[k] * sigmoid(tape.r_logits[k]) }).collect();
        let (mu_w, mu_b, dh_mu) = self.head_mu.backward(&tape.h, &d_mu)?;
        let (r_w, r_b, dh_r) = self.head_r.backward(&tape.h, &d_logits)?;
        let d_trunk: Vec<T> =
            dh_mu.iter().zip(&dh_r).zip(&tape.trunk_out).map(|((&a, &b), &z)| if z > T::zero() { a + b } else { T::zero() }).collect();
        let (mut grads, dz) = self.trunk.backward(&tape.trunk, &d_trunk)?;
        grads.extend(Grads(vec![mu_w, mu_b, r_w, r_b]));
        Ok((grads, dz))
    }
}

impl<T: Scalar> Parameters<T> for EnvelopeHead<T> {
    /// Trunk layers, then `mu.weight, mu.bias, r.weight, r.bias`.
    fn param_slices(&self) -> Vec<&[T]> {
        let mut v = self.trunk.param_slices();
        v.extend(self.head_mu.param_slices());
        v.extend(self.head_r.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.trunk.param_slices_mut();
        v.extend(self.head_mu.param_slices_mut());
        v.extend(self.head_r.param_slices_mut());
        v
    }
}

/// MLP regressing the bounded offset `tanh(g(s))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorHead<T> {
    pub net: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct SelectorTape<T> {
    net: MlpTape<T>,
    delta: [T; 2],
}

impl<T: Scalar> SelectorHead<T> {
    pub fn new(net: Mlp<T>) -> Result<Self> {
        if net.output_dim() != 2 {
            return Err(Error::dims("selector output", 2, net.output_dim()));
        }
        Ok(Self { net })
    }

    pub fn init_with_rng<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init_with_rng(dims, rng)?)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn forward(&self, s: &PooledFeature<T>) -> Result<(Offset<T>, SelectorTape<T>)> {
        let (out, net) = self.net.forward(&s.0)?;
        let delta = [out[0].tanh(), out[1].tanh()];
        Ok((Offset { delta }, SelectorTape { net, delta }))
    }

    pub fn backward(&self, tape: &SelectorTape<T>, d_delta: [T; 2]) -> Result<Grads<T>> {
        let d_out: Vec<T> = (0..2).map(|k| d_delta[k] * (T::one() - tape.delta[k] * tape.delta[k])).collect();
        Ok(self.net.backward(&tape.net, &d_out)?.0)
    }
}

impl<T: Scalar> Parameters<T> for SelectorHead<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.net.param_slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.net.param_slices_mut()
    }
}

/// Widths of the two heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadArch {
    pub hidden: usize,
    /// Linear layers in the envelope trunk.
    pub trunk_layers: usize,
    /// Linear layers in the selector, including its 2-wide output.
    pub selector_layers: usize,
}

impl Default for HeadArch {
    fn default() -> Self {
        Self { hidden: 256, trunk_layers: 3, selector_layers: 3 }
    }
}

impl HeadArch {
    pub fn trunk_dims(&self, text_dim: usize) -> Vec<usize> {
        std::iter::once(text_dim).chain(std::iter::repeat_n(self.hidden, self.trunk_layers)).collect()
    }

    pub fn selector_dims(&self, feature_dim: usize) -> Vec<usize> {
        let hidden = self.selector_layers.saturating_sub(1);
        std::iter::once(feature_dim).chain(std::iter::repeat_n(self.hidden, hidden)).chain(std::iter::once(2)).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::calib::compose;
    use crate::neural::grad_check;

    fn zero_envelope(d: usize, width: usize) -> EnvelopeHead<f64> {
        EnvelopeHead::new(
            Mlp::from_layers(vec![DenseLayer::zeros(d, width)]).unwrap(),
            DenseLayer::zeros(width, 2),
            DenseLayer::zeros(width, 2),
            3.0,
        )
        .unwrap()
    }

    #[test]
    fn pooling_examples() {
        let maps = (1..=4).map(|c| FeatureMap::new(1, 2, 3, vec![c as f64; 6]).unwrap()).collect();
        assert_eq!(pool_features(&FeaturePyramid::Maps(maps)).unwrap().0, vec![1.0, 2.0, 3.0, 4.0]);

        let m = FeatureMap::new(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(m.global_average(), vec![4.0]);

        let maps = (0..4).map(|_| FeatureMap::new(2, 2, 2, vec![0.5; 8]).unwrap()).collect();
        assert_eq!(pool_features(&FeaturePyramid::Maps(maps)).unwrap().0.len(), 8);

        let pooled = FeaturePyramid::Pooled(vec![vec![1.0], vec![2.0, 3.0], vec![4.0], vec![5.0]]);
        assert_eq!(pool_features(&pooled).unwrap().0, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn pooling_rejects_wrong_level_count() {
        let maps = (0..3).map(|_| FeatureMap::new(1, 1, 1, vec![0.0]).unwrap()).collect();
        assert!(pool_features(&FeaturePyramid::Maps(maps)).is_err());
        assert!(pool_features(&FeaturePyramid::<f64>::Pooled(vec![vec![1.0]; 5])).is_err());
    }

    #[test]
    fn zero_envelope_head() {
        let head = zero_envelope(4, 3);
        let (env, _) = head.forward(&TextEmbedding(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
        assert_eq!(env.mu, [0.0, 0.0]);
        assert_eq!(env.r, [std::f64::consts::LN_2; 2]);
    }

    #[test]
    fn radius_clamps_at_r_max() {
        let mut head = zero_envelope(2, 2);
        head.head_r.bias = vec![10.0, 10.0];
        let (env, tape) = head.forward(&TextEmbedding(vec![0.0, 0.0])).unwrap();
        assert_eq!(env.r, [3.0, 3.0]);
        assert_eq!(tape.clamped(), [true, true]);
        let (g, _) = head.backward(&tape, [0.0; 2], [1.0, 1.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mu_head_passes_trunk_output() {
        let trunk = Mlp::from_layers(vec![DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap()]).unwrap();
        let head =
            EnvelopeHead::new(trunk, DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap(), DenseLayer::zeros(2, 2), 3.0)
                .unwrap();
        let (env, _) = head.forward(&TextEmbedding(vec![0.7, 1.9])).unwrap();
        assert_eq!(env.mu, [0.7, 1.9]);
    }

    #[test]
    fn selector_examples() {
        let zero = SelectorHead::new(Mlp::from_layers(vec![DenseLayer::zeros(3, 2)]).unwrap()).unwrap();
        let (off, _) = zero.forward(&PooledFeature(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(off.delta, [0.0, 0.0]);

        let big = SelectorHead::new(Mlp::from_layers(vec![DenseLayer::new(1, 2, vec![0.0; 2], vec![1e3, 0.0]).unwrap()]).unwrap()).unwrap();
        assert_eq!(big.forward(&PooledFeature(vec![0.0])).unwrap().0.delta[0], 1.0);

        let half =
            SelectorHead::new(Mlp::from_layers(vec![DenseLayer::new(1, 2, vec![0.0f64; 2], vec![0.5, -0.5]).unwrap()]).unwrap()).unwrap();
        let d = half.forward(&PooledFeature(vec![0.0])).unwrap().0.delta;
        // tanh(0.5), high-precision reference 0.46211715726000975850...
        assert!((d[0] - 0.462_117_157_260_009_76).abs() < 1e-15);
        assert!((d[1] + 0.462_117_157_260_009_76).abs() < 1e-15);

        assert!(zero.forward(&PooledFeature(vec![1.0])).is_err());
        assert!(SelectorHead::new(Mlp::from_layers(vec![DenseLayer::<f64>::zeros(3, 3)]).unwrap()).is_err());
    }

    #[test]
    fn arch_dims() {
        let a = HeadArch::default();
        assert_eq!(a.trunk_dims(512), vec![512, 256, 256, 256]);
        assert_eq!(a.selector_dims(720), vec![720, 256, 256, 2]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env_head: EnvelopeHead<f64> = EnvelopeHead::init_with_rng(&[6, 8, 8], 3.0, &mut rng).unwrap();
        let sel: SelectorHead<f64> = SelectorHead::init_with_rng(&[5, 8, 2], &mut rng).unwrap();
        let z = TextEmbedding((0..6).map(|_| rng.random_range(-1.0f64..1.0)).collect());
        let s = PooledFeature((0..5).map(|_| rng.random_range(-1.0f64..1.0)).collect());
        let (w_mu, w_r, w_d) = ([0.3, -0.8], [1.1, 0.4], [-0.6, 0.9]);

        let (_, tape) = env_head.forward(&z).unwrap();
        let (g, _) = env_head.backward(&tape, w_mu, w_r).unwrap();
        let mut probe = env_head.clone();
        let rep = grad_check(&env_head.flat_params(), &g.flat(), 1e-5, 1e-4, |p| {
            probe.set_flat_params(p)?;
            let (e, _) = probe.forward(&z)?;
            Ok(e.mu[0] * w_mu[0] + e.mu[1] * w_mu[1] + e.r[0] * w_r[0] + e.r[1] * w_r[1])
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");

        let (_, tape) = sel.forward(&s).unwrap();
        let g = sel.backward(&tape, w_d).unwrap();
        let mut probe = sel.clone();
        let rep = grad_check(&sel.flat_params(), &g.flat(), 1e-5, 1e-4, |p| {
            probe.set_flat_params(p)?;
            let (o, _) = probe.forward(&s)?;
            Ok(o.delta[0] * w_d[0] + o.delta[1] * w_d[1])
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 16), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut shuffled = vals.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mk = |v: &Vec<f64>| {
                let mut maps = vec![FeatureMap::new(1, 4, 4, v.clone()).unwrap()];
                maps.extend((0..3).map(|_| FeatureMap::new(1, 1, 1, vec![1.0]).unwrap()));
                pool_features(&FeaturePyramid::Maps(maps)).unwrap().0
            };
            let (a, b) = (mk(&vals), mk(&shuffled));
            prop_assert!((a[0] - b[0]).abs() < 1e-12);
        }

        #[test]
        fn composed_calibration_stays_in_envelope(seed in 0u64..500, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env_head: EnvelopeHead<f64> = EnvelopeHead::init_with_rng(&[4, 8], 3.0, &mut rng).unwrap();
            let sel: SelectorHead<f64> = SelectorHead::init_with_rng(&[3, 8, 2], &mut rng).unwrap();
            let z = TextEmbedding((0..4).map(|_| scale * rng.random_range(-1.0f64..1.0)).collect());
            let s = PooledFeature((0..3).map(|_| scale * rng.random_range(-1.0f64..1.0)).collect());
            let (env, _) = env_head.forward(&z).unwrap();
            let (off, _) = sel.forward(&s).unwrap();
            let t = compose(&env, &off).as_array();
            for (k, tk) in t.iter().enumerate() {
                prop_assert!(env.r[k] <= 3.0);
                // Rounding in mu + r * delta can overshoot by an ulp of mu.
                prop_assert!((tk - env.mu[k]).abs() <= env.r[k] + 2.0 * f64::EPSILON * env.mu[k].abs().max(1.0));
            }
        }
    }
}
