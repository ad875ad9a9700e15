//! Batched im2col convolutions over `[batch, channels, h, w]` tensors.

use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Param};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Sliding-window geometry: a `kernel`×`kernel` window moving over an
/// `image` of `channels` planes produces one column per `grid` position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    image: (usize, usize),
    grid: (usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn grid_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn image_len(&self) -> usize {
        self.channels * self.image.0 * self.image.1
    }

    /// Source pixel of window offset `k` at grid coordinate `o`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// `[batch·C·H·W] -> [C·k·k, batch·grid]`
    fn im2col(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (h, w) = self.image;
        let (gh, gw) = self.grid;
        let cols = batch * self.grid_len();
        let mut col = vec![0.0; self.rows() * cols];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let r = (c * self.kernel + ki) * self.kernel + kj;
                    let out = &mut col[r * cols..(r + 1) * cols];
                    for b in 0..batch {
                        let plane = &x[(b * self.channels + c) * h * w..][..h * w];
                        for oi in 0..gh {
                            let Some(ii) = self.source(oi, ki, h) else {
                                continue;
                            };
                            let dst = &mut out[(b * gh + oi) * gw..][..gw];
                            for (oj, d) in dst.iter_mut().enumerate() {
                                if let Some(jj) = self.source(oj, kj, w) {
                                    *d = plane[ii * w + jj];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Geometry::im2col`]: scatters columns back onto images.
    fn col2im(&self, col: &[f64], batch: usize) -> Vec<f64> {
        let (h, w) = self.image;
        let (gh, gw) = self.grid;
        let cols = batch * self.grid_len();
        let mut x = vec![0.0; batch * self.image_len()];
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let r = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &col[r * cols..(r + 1) * cols];
                    for b in 0..batch {
                        let plane = &mut x[(b * self.channels + c) * h * w..][..h * w];
                        for oi in 0..gh {
                            let Some(ii) = self.source(oi, ki, h) else {
                                continue;
                            };
                            let s = &src[(b * gh + oi) * gw..][..gw];
                            for (oj, v) in s.iter().enumerate() {
                                if let Some(jj) = self.source(oj, kj, w) {
                                    plane[ii * w + jj] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[batch, channels, p] -> [channels, batch·p]`
fn to_channel_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * p..][..p].copy_from_slice(&x[(b * channels + c) * p..][..p]);
        }
    }
    out
}

/// `[channels, batch·p] -> [batch, channels, p]`
fn to_batch_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for b in 0..batch {
            out[(b * channels + c) * p..][..p].copy_from_slice(&x[(c * batch + b) * p..][..p]);
        }
    }
    out
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], p: usize) {
    for (chunk, b) in y.chunks_mut(p).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias_grad(grad: &[f64], bias_grad: &mut [f64], p: usize) {
    let channels = bias_grad.len();
    for (i, chunk) in grad.chunks(p).enumerate() {
        bias_grad[i % channels] += chunk.iter().sum::<f64>();
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Square-kernel 2-D convolution; weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Param,
    pub bias: Param,
    geometry: Geometry,
    cols: Option<(Vec<f64>, usize)>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input_hw: (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let grid = (
            conv_output_size(input_hw.0, kernel, stride, padding),
            conv_output_size(input_hw.1, kernel, stride, padding),
        );
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            weight: Param::fan_in_uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::fan_in_uniform(out_channels, fan_in, rng),
            geometry: Geometry {
                channels: in_channels,
                image: input_hw,
                grid,
                kernel,
                stride,
                padding,
            },
            cols: None,
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        self.geometry.grid
    }

    fn run(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let g = &self.geometry;
        assert_eq!(x.row_len(), g.image_len(), "conv input size");
        let batch = x.batch();
        let col = g.im2col(x.data(), batch);
        let n = batch * g.grid_len();
        let mut ymat = vec![0.0; self.out_channels * n];
        gemm(
            self.out_channels,
            g.rows(),
            n,
            &self.weight.value,
            (g.rows(), 1),
            &col,
            (n, 1),
            0.0,
            &mut ymat,
            (n, 1),
        );
        let mut y = to_batch_major(&ymat, batch, self.out_channels, g.grid_len());
        add_channel_bias(&mut y, &self.bias.value, g.grid_len());
        let shape = vec![batch, self.out_channels, g.grid.0, g.grid.1];
        (Tensor::new(shape, y).expect("conv output shape"), col)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x).0
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let (y, col) = self.run(&x);
        self.cols = Some((col, x.batch()));
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let (col, batch) = self.cols.take().expect("conv backward without forward");
        let g = self.geometry;
        let p = g.grid_len();
        let n = batch * p;
        accumulate_channel_bias_grad(grad.data(), &mut self.bias.grad, p);
        let gmat = to_channel_major(grad.data(), batch, self.out_channels, p);
        gemm(
            self.out_channels,
            n,
            g.rows(),
            &gmat,
            (n, 1),
            &col,
            (1, n),
            1.0,
            &mut self.weight.grad,
            (g.rows(), 1),
        );
        let mut dcol = vec![0.0; g.rows() * n];
        gemm(
            g.rows(),
            self.out_channels,
            n,
            &self.weight.value,
            (1, g.rows()),
            &gmat,
            (n, 1),
            0.0,
            &mut dcol,
            (n, 1),
        );
        let dx = g.col2im(&dcol, batch);
        Tensor::new(vec![batch, g.channels, g.image.0, g.image.1], dx).expect("conv input shape")
    }
}

/// Square-kernel transposed convolution; weight layout `[in, out, k, k]`.
/// Output size is `(in - 1)·stride - 2·padding + kernel + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Param,
    pub bias: Param,
    geometry: Geometry,
    input: Option<Vec<f64>>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input_hw: (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        assert!(output_padding.0 < stride && output_padding.1 < stride);
        let out = |i: usize, op: usize| (i - 1) * stride + kernel + op - 2 * padding;
        let image = (out(input_hw.0, output_padding.0), out(input_hw.1, output_padding.1));
        let fan_in = in_channels * kernel * kernel;
        ConvTranspose2d {
            in_channels,
            out_channels,
            weight: Param::fan_in_uniform(in_channels * out_channels * kernel * kernel, fan_in, rng),
            bias: Param::fan_in_uniform(out_channels, fan_in, rng),
            geometry: Geometry {
                channels: out_channels,
                image,
                grid: input_hw,
                kernel,
                stride,
                padding,
            },
            input: None,
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        self.geometry.image
    }

    fn run(&self, xmat: &[f64], batch: usize) -> Tensor {
        let g = &self.geometry;
        let n = batch * g.grid_len();
        let mut col = vec![0.0; g.rows() * n];
        gemm(
            g.rows(),
            self.in_channels,
            n,
            &self.weight.value,
            (1, g.rows()),
            xmat,
            (n, 1),
            0.0,
            &mut col,
            (n, 1),
        );
        let mut y = g.col2im(&col, batch);
        add_channel_bias(&mut y, &self.bias.value, g.image.0 * g.image.1);
        Tensor::new(vec![batch, self.out_channels, g.image.0, g.image.1], y).expect("transposed conv output shape")
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let g = &self.geometry;
        assert_eq!(
            x.row_len(),
            self.in_channels * g.grid_len(),
            "transposed conv input size"
        );
        let xmat = to_channel_major(x.data(), x.batch(), self.in_channels, g.grid_len());
        self.run(&xmat, x.batch())
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let g = &self.geometry;
        assert_eq!(
            x.row_len(),
            self.in_channels * g.grid_len(),
            "transposed conv input size"
        );
        let xmat = to_channel_major(x.data(), x.batch(), self.in_channels, g.grid_len());
        let y = self.run(&xmat, x.batch());
        self.input = Some(xmat);
        y
    }

    pub fn backward(&mut self, grad: Tensor) -> Tensor {
        let xmat = self.input.take().expect("transposed conv backward without forward");
        let g = self.geometry;
        let batch = grad.batch();
        let n = batch * g.grid_len();
        accumulate_channel_bias_grad(grad.data(), &mut self.bias.grad, g.image.0 * g.image.1);
        let gcol = g.im2col(grad.data(), batch);
        gemm(
            self.in_channels,
            n,
            g.rows(),
            &xmat,
            (n, 1),
            &gcol,
            (1, n),
            1.0,
            &mut self.weight.grad,
            (g.rows(), 1),
        );
        let mut dxmat = vec![0.0; self.in_channels * n];
        gemm(
            self.in_channels,
            g.rows(),
            n,
            &self.weight.value,
            (g.rows(), 1),
            &gcol,
            (n, 1),
            0.0,
            &mut dxmat,
            (n, 1),
        );
        let dx = to_batch_major(&dxmat, batch, self.in_channels, g.grid_len());
        Tensor::new(vec![batch, self.in_channels, g.grid.0, g.grid.1], dx).expect("transposed conv input shape")
    }
}
