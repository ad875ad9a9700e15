use alloc::vec;

use super::{gemm, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: Param::fan_in_uniform(in_dim * out_dim, in_dim, rng),
            bias: Param::fan_in_uniform(out_dim, in_dim, rng),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.row_len(), self.in_dim, "linear layer input width");
        let b = x.batch();
        let mut y = Tensor::zeros(vec![b, self.out_dim]);
        for row in y.data_mut().chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            b,
            self.in_dim,
            self.out_dim,
            x.data(),
            (self.in_dim, 1),
            &self.weight.value,
            (1, self.in_dim),
            1.0,
            y.data_mut(),
            (self.out_dim, 1),
        );
        y
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward");
        let b = x.batch();
        // dW += gᵀ·x
        gemm(
            self.out_dim,
            b,
            self.in_dim,
            grad.data(),
            (1, self.out_dim),
            x.data(),
            (self.in_dim, 1),
            1.0,
            &mut self.weight.grad,
            (self.in_dim, 1),
        );
        for row in grad.rows().take(b) {
            for (db, g) in self.bias.grad.iter_mut().zip(row) {
                *db += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape().to_vec());
        gemm(
            b,
            self.out_dim,
            self.in_dim,
            grad.data(),
            (self.out_dim, 1),
            &self.weight.value,
            (self.in_dim, 1),
            0.0,
            dx.data_mut(),
            (self.in_dim, 1),
        );
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, Layer};
    use crate::rng;

    #[test]
    fn known_product() {
        let mut r = rng::derive(0, &[]);
        let mut l = Linear::new(2, 1, &mut r);
        l.weight.value = vec![2.0, -1.0];
        l.bias.value = vec![0.5];
        let y = l.infer(&Tensor::from_rows(&[[1.0, 3.0]]).unwrap());
        assert_eq!(y.data(), &[-0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::derive(1, &[]);
        let x = Tensor::from_rows(&[[0.1, -0.4, 0.8], [1.2, 0.3, -0.9]]).unwrap();
        gradcheck::check_layer(Layer::Linear(Linear::new(3, 4, &mut r)), x, 1e-6);
    }
}
