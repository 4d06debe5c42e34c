use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flattened parameter access in a fixed, documented order.
pub trait Parameters<T: Scalar> {
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;

    fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_params(&self) -> Vec<T> {
        self.param_slices().concat()
    }

    fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let n = self.n_params();
        if flat.len() != n {
            return Err(Error::dims("flat parameters", n, flat.len()));
        }
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`Parameters`] slice order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(shapes: &[&[T]]) -> Self {
        Grads(shapes.iter().map(|s| vec![T::zero(); s.len()]).collect())
    }

    pub fn slices(&self) -> Vec<&[T]> {
        self.0.iter().map(|v| v.as_slice()).collect()
    }

    pub fn flat(&self) -> Vec<T> {
        self.0.concat()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::dims("gradient groups", self.0.len(), other.0.len()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if a.len() != b.len() {
                return Err(Error::dims("gradient buffer", a.len(), b.len()));
            }
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn extend(&mut self, other: Self) {
        self.0.extend(other.0);
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major
/// (`out_dim x in_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("dense layer", "dimensions must be positive"));
        }
        if weight.len() != in_dim * out_dim {
            return Err(Error::dims("dense weight", in_dim * out_dim, weight.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dims("dense bias", out_dim, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense layer"));
        }
        Ok(Self { in_dim, out_dim, weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![T::zero(); in_dim * out_dim], bias: vec![T::zero(); out_dim] }
    }

    /// Weights and biases uniform on `+-1/sqrt(fan_in)`.
    pub fn init_with_rng<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| T::lit((2.0 * rng.random::<f64>() - 1.0) * bound)).collect();
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(Error::dims("dense input", self.in_dim, x.len()));
        }
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect())
    }

    /// Returns `(dW, db, dx)` for upstream gradient `dy` at input `x`.
    pub fn backward(&self, x: &[T], dy: &[T]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        if x.len() != self.in_dim {
            return Err(Error::dims("dense backward input", self.in_dim, x.len()));
        }
        if dy.len() != self.out_dim {
            return Err(Error::dims("dense backward grad", self.out_dim, dy.len()));
        }
        let mut dw = Vec::with_capacity(self.weight.len());
        let mut dx = vec![T::zero(); self.in_dim];
        for (row, &g) in self.weight.chunks_exact(self.in_dim).zip(dy) {
            dw.extend(x.iter().map(|&xi| g * xi));
            dx.iter_mut().zip(row).for_each(|(d, &w)| *d += w * g);
        }
        Ok((dw, dy.to_vec(), dx))
    }
}

impl<T: Scalar> Parameters<T> for DenseLayer<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpTape<T> {
    generation: u64,
    /// Input seen by each layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activation produced by each layer; the last one is the output.
    pre: Vec<Vec<T>>,
}

impl<T> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp", "at least one layer is required"));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::dims(format!("mlp layer {} input", i + 1), w[0].out_dim, w[1].in_dim));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Seeded initialization for widths `dims[0] -> dims[1] -> ...`.
    pub fn init_with_rng<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("mlp", "need at least an input and an output width"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("mlp", "widths must be positive"));
        }
        Self::from_layers(dims.windows(2).map(|w| DenseLayer::init_with_rng(w[0], w[1], rng)).collect())
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.out_dim)).collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, MlpTape<T>)> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("mlp input", self.input_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&cur)?;
            let next = if i < last { z.iter().map(|&v| v.max(T::zero())).collect() } else { z.clone() };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(z);
        }
        Ok((cur, MlpTape { generation: self.generation, inputs, pre }))
    }

    /// Reverse pass for `y . dy`. ReLU's derivative at exactly zero is zero.
    pub fn backward(&self, tape: &MlpTape<T>, dy: &[T]) -> Result<(Grads<T>, Vec<T>)> {
        if tape.generation != self.generation || tape.pre.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        if dy.len() != self.output_dim() {
            return Err(Error::dims("mlp output grad", self.output_dim(), dy.len()));
        }
        let last = self.layers.len() - 1;
        let mut grads = vec![Vec::new(); 2 * self.layers.len()];
        let mut d = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d.iter_mut().zip(&tape.pre[i]).for_each(|(g, &z)| {
                    if !(z > T::zero()) {
                        *g = T::zero();
                    }
                });
            }
            let (dw, db, dx) = self.layers[i].backward(&tape.inputs[i], &d)?;
            grads[2 * i] = dw;
            grads[2 * i + 1] = db;
            d = dx;
        }
        Ok((Grads(grads), d))
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    /// Order: `layer0.weight, layer0.bias, layer1.weight, ...`.
    fn param_slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect()
    }
}

/// Builds an MLP over `dims` from a dedicated seeded generator.
pub fn init_mlp<T: Scalar>(dims: &[usize], seed: u64) -> Result<Mlp<T>> {
    Mlp::init_with_rng(dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::grad_check;

    fn hand_net() -> Mlp<f64> {
        Mlp::from_layers(vec![
            DenseLayer::new(1, 2, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap(),
            DenseLayer::new(2, 1, vec![1.0, 1.0], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a: Mlp<f64> = init_mlp(&[4, 2], 7).unwrap();
        let b: Mlp<f64> = init_mlp(&[4, 2], 7).unwrap();
        let bits = |m: &Mlp<f64>| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c: Mlp<f64> = init_mlp(&[4, 2], 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_shapes_and_ranges() {
        let m: Mlp<f64> = init_mlp(&[512, 256, 256, 256], 1).unwrap();
        assert_eq!(m.layers().len(), 3);
        assert_eq!(m.dims(), vec![512, 256, 256, 256]);
        for l in m.layers() {
            let bound = 1.0 / (l.in_dim() as f64).sqrt();
            assert!(l.weight.iter().chain(&l.bias).all(|w| w.abs() <= bound));
            assert!(l.bias.iter().any(|&b| b != 0.0));
        }
        assert!(init_mlp::<f64>(&[], 0).is_err());
        assert!(init_mlp::<f64>(&[3], 0).is_err());
    }

    #[test]
    fn identity_and_bias_only_layers() {
        let id = Mlp::from_layers(vec![DenseLayer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap()]).unwrap();
        assert_eq!(id.forward(&[0.3, -4.0]).unwrap().0, vec![0.3, -4.0]);

        let b = Mlp::from_layers(vec![DenseLayer::new(3, 2, vec![0.0; 6], vec![1.5, -2.0]).unwrap()]).unwrap();
        assert_eq!(b.forward(&[9.0, 8.0, 7.0]).unwrap().0, vec![1.5, -2.0]);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        let (y, _) = hand_net().forward(&[3.0]).unwrap();
        assert_eq!(y, vec![3.0]);
        let (y, _) = hand_net().forward(&[-2.0]).unwrap();
        assert_eq!(y, vec![2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(hand_net().forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn linear_chain_rule() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = Mlp::from_layers(vec![DenseLayer::new(3, 2, w, vec![0.1, 0.2]).unwrap()]).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = m.forward(&x).unwrap();
        let (g, dx) = m.backward(&tape, &[1.0, 0.0]).unwrap();
        assert_eq!(&g.0[0][..3], &x);
        assert_eq!(&g.0[0][3..], &[0.0; 3]);
        assert_eq!(g.0[1], vec![1.0, 0.0]);
        assert_eq!(dx, vec![1.0, 2.0, 3.0]);

        let (g, dx) = m.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let m = Mlp::from_layers(vec![
            DenseLayer::new(1, 1, vec![1.0], vec![0.0]).unwrap(),
            DenseLayer::new(1, 1, vec![2.0], vec![0.0]).unwrap(),
        ])
        .unwrap();
        let (_, tape) = m.forward(&[0.0]).unwrap();
        let (g, dx) = m.backward(&tape, &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(g.0[1], vec![0.0]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = hand_net();
        let (_, tape) = m.forward(&[1.0]).unwrap();
        m.param_slices_mut()[0][0] = 2.0;
        assert!(matches!(m.backward(&tape, &[1.0]), Err(Error::StaleTape)));
        let other = Mlp::from_layers(vec![DenseLayer::<f64>::zeros(1, 1)]).unwrap();
        assert!(other.backward(&tape, &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5u64 {
            let dims = [16, 8, 8, 2];
            let net: Mlp<f64> = init_mlp(&dims, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy = [0.7, -1.3];
            let (_, tape) = net.forward(&x).unwrap();
            let (g, _) = net.backward(&tape, &dy).unwrap();
            let mut probe = net.clone();
            let report = grad_check(&net.flat_params(), &g.flat(), 1e-5, 1e-4, |p| {
                probe.set_flat_params(p)?;
                let (y, _) = probe.forward(&x)?;
                Ok(y[0] * dy[0] + y[1] * dy[1])
            })
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }
}
