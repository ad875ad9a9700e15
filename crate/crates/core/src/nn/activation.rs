use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn apply(x: &Tensor) -> Tensor {
        x.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Relu::apply(&x)
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without forward");
        for (g, keep) in grad.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        grad
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    output: Option<Tensor>,
}

impl Sigmoid {
    pub fn apply(x: &Tensor) -> Tensor {
        x.map(sigmoid)
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let y = Sigmoid::apply(&x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let y = self.output.take().expect("sigmoid backward without forward");
        for (g, s) in grad.data_mut().iter_mut().zip(y.data()) {
            *g *= s * (1.0 - s);
        }
        grad
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Changes the per-sample layout, e.g. flat pixels to `[channels, h, w]`.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub sample_shape: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(sample_shape: Vec<usize>) -> Self {
        Reshape {
            sample_shape,
            input_shape: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        x.clone()
            .reshaped(&self.sample_shape)
            .expect("reshape preserves the element count")
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        self.input_shape = Some(x.shape().to_vec());
        x.reshaped(&self.sample_shape)
            .expect("reshape preserves the element count")
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let shape = self.input_shape.take().expect("reshape backward without forward");
        grad.reshaped(&shape[1..]).expect("gradient matches the input")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, Layer};

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn activation_gradients() {
        let x = Tensor::from_rows(&[[0.3, -0.2, 1.5], [-2.0, 0.7, 0.1]]).unwrap();
        gradcheck::check_layer(Layer::Sigmoid(Sigmoid::default()), x.clone(), 1e-6);
        gradcheck::check_layer(Layer::Relu(Relu::default()), x, 1e-6);
    }
}
