//! A small layer-wise backpropagation engine.
//!
//! Each layer caches what its backward pass needs during a training
//! [`Layer::forward`]; [`Layer::infer`] is the side-effect-free variant used
//! for evaluation. Gradients accumulate into [`Param::grad`] until
//! [`Network::zero_grad`].

mod activation;
mod conv;
mod linear;

use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

pub use activation::{Relu, Reshape, Sigmoid};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

/// A learnable array with its gradient and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: alloc::vec![0.0; n],
            first_moment: alloc::vec![0.0; n],
            second_moment: alloc::vec![0.0; n],
        }
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(len: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let dist = Uniform::new_inclusive(-bound, bound);
        Param::new((0..len).map(|_| dist.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Relu(Relu),
    Sigmoid(Sigmoid),
    Reshape(Reshape),
}

impl Layer {
    pub fn forward(&mut self, x: Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Sigmoid(l) => l.forward(x),
            Layer::Reshape(l) => l.forward(x),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Conv2d(l) => l.infer(x),
            Layer::ConvTranspose2d(l) => l.infer(x),
            Layer::Relu(_) => Relu::apply(x),
            Layer::Sigmoid(_) => Sigmoid::apply(x),
            Layer::Reshape(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::ConvTranspose2d(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
            Layer::Reshape(l) => l.backward(grad),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => alloc::vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => alloc::vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => alloc::vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => alloc::vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => alloc::vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => alloc::vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

/// A feed-forward stack of layers with its own Adam step counter.
#[derive(Debug, Clone, Default)]
pub struct Network {
    layers: Vec<Layer>,
    adam_steps: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers, adam_steps: 0 }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        self.layers.iter_mut().fold(x, |h, l| l.forward(h))
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut layers = self.layers.iter();
        match layers.next() {
            None => x.clone(),
            Some(first) => layers.fold(first.infer(x), |h, l| l.infer(&h)),
        }
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        self.layers.iter_mut().rev().fold(grad, |g, l| l.backward(g))
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_steps += 1;
        let t = self.adam_steps as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        for p in self.params_mut() {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                p.value[i] -= cfg.learning_rate * (m / c1) / (libm::sqrt(v / c2) + cfg.epsilon);
            }
        }
    }
}

/// `head(concat(flatten(trunk(x)), condition))`: a network that receives a
/// conditioning vector next to the (possibly convolutional) features of its
/// main input.
#[derive(Debug, Clone)]
pub struct ConditionedNet {
    pub trunk: Network,
    pub head: Network,
    trunk_output_shape: Option<Vec<usize>>,
}

impl ConditionedNet {
    pub fn new(trunk: Network, head: Network) -> Self {
        ConditionedNet {
            trunk,
            head,
            trunk_output_shape: None,
        }
    }

    pub fn forward(&mut self, x: Tensor, condition: &Tensor) -> Tensor {
        let features = self.trunk.forward(x);
        self.trunk_output_shape = Some(features.shape().to_vec());
        let joined =
            Tensor::concat_columns(&features.flattened(), condition).expect("trunk and condition batch sizes agree");
        self.head.forward(joined)
    }

    pub fn infer(&self, x: &Tensor, condition: &Tensor) -> Tensor {
        let features = self.trunk.infer(x).flattened();
        let joined = Tensor::concat_columns(&features, condition).expect("trunk and condition batch sizes agree");
        self.head.infer(&joined)
    }

    /// Returns the gradients with respect to `(x, condition)`.
    pub fn backward(&mut self, grad: Tensor) -> (Tensor, Tensor) {
        let shape = self
            .trunk_output_shape
            .take()
            .expect("backward called without a training forward");
        let joined = self.head.backward(grad);
        let width: usize = shape[1..].iter().product();
        let (features, condition) = joined.split_columns(width);
        let features = features
            .reshaped(&shape[1..])
            .expect("trunk gradient matches its output");
        (self.trunk.backward(features), condition)
    }

    pub fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.head.zero_grad();
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.trunk.adam_step(cfg);
        self.head.adam_step(cfg);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// `C = A·B + beta·C` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences over a scalar function of a layer.
    use super::*;

    /// Checks `d/dθ sum(w ⊙ f(x))` for every parameter and `d/dx`.
    pub fn check_layer(mut layer: Layer, x: Tensor, tol: f64) {
        let y = layer.infer(&x);
        let weights: Vec<f64> = (0..y.len()).map(|i| 0.3 + 0.1 * ((i * 7) % 11) as f64).collect();
        let objective =
            |l: &Layer, x: &Tensor| -> f64 { l.infer(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let out = layer.forward(x.clone());
        let g = Tensor::new(out.shape().to_vec(), weights.clone()).unwrap();
        let dx = layer.backward(g);
        let h = 1e-6;
        for (pi, analytic) in layer
            .params()
            .iter()
            .map(|p| p.grad.clone())
            .enumerate()
            .collect::<Vec<_>>()
        {
            for i in 0..analytic.len() {
                let mut plus = layer.clone();
                plus.params_mut()[pi].value[i] += h;
                let mut minus = layer.clone();
                minus.params_mut()[pi].value[i] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                assert_close(analytic[i], fd, tol);
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * h);
            assert_close(dx.data()[i], fd, tol);
        }
    }

    pub fn assert_close(a: f64, b: f64, tol: f64) {
        let scale = a.abs().max(b.abs()).max(1.0);
        assert!((a - b).abs() <= tol * scale, "analytic {a} vs numeric {b}");
    }
}
