//! One CausalNL branch: a label encoder `q(Y|X)`, a latent encoder
//! `q(Z|Y,X)`, an instance decoder `p(X|Y,Z)` and a noise decoder
//! `p(Ỹ|Y,X̂)`, plus the plain classifier shared with the baselines.
//!
//! During training the label is carried as the softmax probability vector;
//! hard labels are only produced by [`Predict::predict`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{
    AdamConfig, ConditionedNet, Conv2d, ConvTranspose2d, Layer, Linear, Network, Param, Relu, Reshape, Sigmoid,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Fully connected networks for low-dimensional vectors.
    #[serde(rename = "mlp-2d")]
    Mlp2d,
    /// Stride-2 convolution stacks (32/64/128/256) and a mirrored transposed stack.
    ConvSmall,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Mlp2d => "mlp-2d",
            Preset::ConvSmall => "conv-small",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-2d" | "mlp" => Ok(Preset::Mlp2d),
            "conv-small" | "conv" => Ok(Preset::ConvSmall),
            other => Err(Error::invalid(alloc::format!("unknown architecture preset {other:?}"))),
        }
    }
}

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;
pub const CONV_FEATURE_MAPS: [usize; 4] = [32, 64, 128, 256];
pub const CLASSIFIER_FEATURE_MAPS: [usize; 2] = [32, 64];
pub const CLASSIFIER_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: Preset,
    pub feature_dim: usize,
    pub image_shape: Option<ImageShape>,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Width of the fully connected hidden layers (mlp preset only).
    pub hidden_width: usize,
}

impl Architecture {
    pub fn mlp(feature_dim: usize, num_classes: usize, latent_dim: usize) -> Self {
        Architecture {
            preset: Preset::Mlp2d,
            feature_dim,
            image_shape: None,
            num_classes,
            latent_dim,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
        }
    }

    pub fn conv_small(image_shape: ImageShape, num_classes: usize, latent_dim: usize) -> Self {
        Architecture {
            preset: Preset::ConvSmall,
            feature_dim: image_shape.len(),
            image_shape: Some(image_shape),
            num_classes,
            latent_dim,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
        }
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes < 2 || self.latent_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid(
                "architecture needs feature_dim >= 1, num_classes >= 2, latent_dim >= 1, hidden_width >= 1",
            ));
        }
        if self.preset == Preset::ConvSmall {
            let shape = self
                .image_shape
                .ok_or_else(|| Error::invalid("conv-small preset needs image data"))?;
            if shape.len() != self.feature_dim || shape.height < 2 || shape.width < 2 {
                return Err(Error::invalid("image shape does not match feature_dim"));
            }
        }
        Ok(())
    }

    /// Spatial sizes through the stride-2 stack: `[input, /2, /4, /8, /16]`.
    fn conv_sizes(&self) -> Vec<(usize, usize)> {
        let shape = self.image_shape.expect("validated conv architecture");
        let mut sizes = vec![(shape.height, shape.width)];
        for _ in CONV_FEATURE_MAPS {
            let (h, w) = *sizes.last().unwrap();
            sizes.push((h.div_ceil(2), w.div_ceil(2)));
        }
        sizes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.row_len() != self.feature_dim {
            return Err(Error::invalid(alloc::format!(
                "expected [batch, {}] instances, got {:?}",
                self.feature_dim,
                x.shape()
            )));
        }
        Ok(())
    }
}

fn mlp(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Vec<Layer> {
    vec![
        Layer::Linear(Linear::new(input, hidden, rng)),
        Layer::Relu(Relu::default()),
        Layer::Linear(Linear::new(hidden, hidden, rng)),
        Layer::Relu(Relu::default()),
        Layer::Linear(Linear::new(hidden, output, rng)),
    ]
}

/// Conv stack ending in a flatten; returns the layers and flattened width.
fn conv_trunk(arch: &Architecture, rng: &mut Rng) -> (Vec<Layer>, usize) {
    let shape = arch.image_shape.expect("validated conv architecture");
    let sizes = arch.conv_sizes();
    let mut layers = vec![Layer::Reshape(Reshape::new(vec![
        shape.channels,
        shape.height,
        shape.width,
    ]))];
    let mut channels = shape.channels;
    for (i, maps) in CONV_FEATURE_MAPS.into_iter().enumerate() {
        layers.push(Layer::Conv2d(Conv2d::new(channels, maps, sizes[i], 3, 2, 1, rng)));
        layers.push(Layer::Relu(Relu::default()));
        channels = maps;
    }
    let (h, w) = sizes[CONV_FEATURE_MAPS.len()];
    let flat = channels * h * w;
    layers.push(Layer::Reshape(Reshape::new(vec![flat])));
    (layers, flat)
}

fn build_label_encoder(arch: &Architecture, rng: &mut Rng) -> Network {
    match arch.preset {
        Preset::Mlp2d => Network::new(mlp(arch.feature_dim, arch.hidden_width, arch.num_classes, rng)),
        Preset::ConvSmall => {
            let shape = arch.image_shape.expect("validated conv architecture");
            let sizes = arch.conv_sizes();
            let mut layers = vec![Layer::Reshape(Reshape::new(vec![
                shape.channels,
                shape.height,
                shape.width,
            ]))];
            let mut channels = shape.channels;
            for (i, maps) in CLASSIFIER_FEATURE_MAPS.into_iter().enumerate() {
                layers.push(Layer::Conv2d(Conv2d::new(channels, maps, sizes[i], 3, 2, 1, rng)));
                layers.push(Layer::Relu(Relu::default()));
                channels = maps;
            }
            let (h, w) = sizes[CLASSIFIER_FEATURE_MAPS.len()];
            let flat = channels * h * w;
            layers.push(Layer::Reshape(Reshape::new(vec![flat])));
            layers.push(Layer::Linear(Linear::new(flat, CLASSIFIER_HIDDEN, rng)));
            layers.push(Layer::Relu(Relu::default()));
            layers.push(Layer::Linear(Linear::new(CLASSIFIER_HIDDEN, arch.num_classes, rng)));
            Network::new(layers)
        }
    }
}

/// `(x, y) -> [μ | log σ²]`
fn build_latent_encoder(arch: &Architecture, rng: &mut Rng) -> ConditionedNet {
    let (c, j) = (arch.num_classes, arch.latent_dim);
    match arch.preset {
        Preset::Mlp2d => ConditionedNet::new(
            Network::default(),
            Network::new(mlp(arch.feature_dim + c, arch.hidden_width, 2 * j, rng)),
        ),
        Preset::ConvSmall => {
            let (trunk, flat) = conv_trunk(arch, rng);
            let head = vec![Layer::Linear(Linear::new(flat + c, 2 * j, rng))];
            ConditionedNet::new(Network::new(trunk), Network::new(head))
        }
    }
}

/// `(z, y) -> x̂`
fn build_instance_decoder(arch: &Architecture, rng: &mut Rng) -> ConditionedNet {
    let (c, j) = (arch.num_classes, arch.latent_dim);
    match arch.preset {
        Preset::Mlp2d => ConditionedNet::new(
            Network::default(),
            Network::new(mlp(j + c, arch.hidden_width, arch.feature_dim, rng)),
        ),
        Preset::ConvSmall => {
            let shape = arch.image_shape.expect("validated conv architecture");
            let sizes = arch.conv_sizes();
            let maps = CONV_FEATURE_MAPS;
            let deepest = sizes[maps.len()];
            let top = maps[maps.len() - 1];
            let mut layers = vec![
                Layer::Linear(Linear::new(j + c, top * deepest.0 * deepest.1, rng)),
                Layer::Relu(Relu::default()),
                Layer::Reshape(Reshape::new(vec![top, deepest.0, deepest.1])),
            ];
            // Upsample back through the encoder sizes: 256 -> 128 -> 64 -> 32 -> channels.
            let mut in_maps = top;
            for level in (0..maps.len()).rev() {
                let out_maps = if level == 0 { shape.channels } else { maps[level - 1] };
                let from = sizes[level + 1];
                let to = sizes[level];
                let pad = (to.0 + 1 - 2 * from.0, to.1 + 1 - 2 * from.1);
                layers.push(Layer::ConvTranspose2d(ConvTranspose2d::new(
                    in_maps, out_maps, from, 3, 2, 1, pad, rng,
                )));
                layers.push(if level == 0 {
                    Layer::Sigmoid(Sigmoid::default())
                } else {
                    Layer::Relu(Relu::default())
                });
                in_maps = out_maps;
            }
            layers.push(Layer::Reshape(Reshape::new(vec![arch.feature_dim])));
            ConditionedNet::new(Network::default(), Network::new(layers))
        }
    }
}

/// `(x̂, y) -> noisy-label logits`
fn build_noise_decoder(arch: &Architecture, rng: &mut Rng) -> ConditionedNet {
    let c = arch.num_classes;
    match arch.preset {
        Preset::Mlp2d => ConditionedNet::new(
            Network::default(),
            Network::new(mlp(arch.feature_dim + c, arch.hidden_width, c, rng)),
        ),
        Preset::ConvSmall => {
            let (trunk, flat) = conv_trunk(arch, rng);
            let head = vec![Layer::Linear(Linear::new(flat + c, c, rng))];
            ConditionedNet::new(Network::new(trunk), Network::new(head))
        }
    }
}

/// Diagonal Gaussian parameters, one row per batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl GaussianParams {
    fn from_encoder_output(out: &Tensor, latent_dim: usize) -> Self {
        let (mean, log_variance) = out.split_columns(latent_dim);
        GaussianParams { mean, log_variance }
    }
}

/// `z = μ + exp(½·log σ²) ⊙ ε`
pub fn reparameterize(g: &GaussianParams, epsilon: &Tensor) -> Tensor {
    let mut z = g.mean.clone();
    for ((zi, lv), e) in z.data_mut().iter_mut().zip(g.log_variance.data()).zip(epsilon.data()) {
        *zi += libm::exp(0.5 * lv) * e;
    }
    z
}

pub fn standard_normal(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape product")
}

/// Per-batch outputs of a branch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub label_logits: Tensor,
    pub soft_label: Tensor,
    pub gaussian: GaussianParams,
    pub epsilon: Tensor,
    pub latent: Tensor,
    pub reconstruction: Tensor,
    pub noisy_logits: Tensor,
}

/// Leaf derivatives of a scalar loss with respect to the branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub noisy_logits: Tensor,
    pub reconstruction: Tensor,
    pub soft_label: Tensor,
    pub mean: Tensor,
    pub log_variance: Tensor,
}

pub trait Predict {
    /// Hard labels: argmax of the class logits, ties to the smallest index.
    fn predict(&self, x: &Tensor) -> Vec<usize>;
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// A plain classifier; also the label encoder of a branch.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    net: Network,
}

impl Classifier {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        Ok(Classifier {
            arch,
            net: build_label_encoder(&arch, rng),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.arch.check_input(x)?;
        Ok(self.net.infer(x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.arch.check_input(x)?;
        Ok(self.net.forward(x.clone()))
    }

    pub fn backward(&mut self, grad_logits: Tensor) {
        self.net.backward(grad_logits);
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.net.adam_step(cfg);
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

impl Predict for Classifier {
    fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = self.logits(x).expect("input matches the classifier");
        logits.rows().take(x.batch()).map(argmax).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    arch: Architecture,
    pub label_encoder: Classifier,
    pub latent_encoder: ConditionedNet,
    pub instance_decoder: ConditionedNet,
    pub noise_decoder: ConditionedNet,
}

impl Branch {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        Ok(Branch {
            arch,
            label_encoder: Classifier::new(arch, rng)?,
            latent_encoder: build_latent_encoder(&arch, rng),
            instance_decoder: build_instance_decoder(&arch, rng),
            noise_decoder: build_noise_decoder(&arch, rng),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Training forward pass with `ε` drawn from `rng`; caches for [`Branch::backward`].
    pub fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<BranchOutput> {
        let eps = standard_normal(vec![x.batch(), self.arch.latent_dim], rng);
        self.forward_with_epsilon(x, eps)
    }

    pub fn forward_with_epsilon(&mut self, x: &Tensor, epsilon: Tensor) -> Result<BranchOutput> {
        self.check_epsilon(x, &epsilon)?;
        let label_logits = self.label_encoder.forward(x)?;
        let soft_label = losses::softmax_rows(&label_logits);
        let enc = self.latent_encoder.forward(x.clone(), &soft_label);
        let gaussian = GaussianParams::from_encoder_output(&enc, self.arch.latent_dim);
        let latent = reparameterize(&gaussian, &epsilon);
        let reconstruction = self.instance_decoder.forward(latent.clone(), &soft_label);
        let noisy_logits = self.noise_decoder.forward(reconstruction.clone(), &soft_label);
        Ok(BranchOutput {
            label_logits,
            soft_label,
            gaussian,
            epsilon,
            latent,
            reconstruction,
            noisy_logits,
        })
    }

    /// Side-effect-free forward pass with a given `ε`.
    pub fn infer_with_epsilon(&self, x: &Tensor, epsilon: Tensor) -> Result<BranchOutput> {
        self.check_epsilon(x, &epsilon)?;
        let label_logits = self.label_encoder.logits(x)?;
        let soft_label = losses::softmax_rows(&label_logits);
        let gaussian = self.encode_latent(x, &soft_label);
        let latent = reparameterize(&gaussian, &epsilon);
        let reconstruction = self.decode(&latent, &soft_label);
        let noisy_logits = self.noise_logits(&reconstruction, &soft_label);
        Ok(BranchOutput {
            label_logits,
            soft_label,
            gaussian,
            epsilon,
            latent,
            reconstruction,
            noisy_logits,
        })
    }

    pub fn infer(&self, x: &Tensor, rng: &mut Rng) -> Result<BranchOutput> {
        let eps = standard_normal(vec![x.batch(), self.arch.latent_dim], rng);
        self.infer_with_epsilon(x, eps)
    }

    /// `q(Z | x, y)` for an arbitrary label vector `y`.
    pub fn encode_latent(&self, x: &Tensor, label: &Tensor) -> GaussianParams {
        GaussianParams::from_encoder_output(&self.latent_encoder.infer(x, label), self.arch.latent_dim)
    }

    /// Mean of `p(X | y, z)`.
    pub fn decode(&self, latent: &Tensor, label: &Tensor) -> Tensor {
        self.instance_decoder.infer(latent, label)
    }

    /// Logits of `p(Ỹ | y, x̂)`.
    pub fn noise_logits(&self, reconstruction: &Tensor, label: &Tensor) -> Tensor {
        self.noise_decoder.infer(reconstruction, label)
    }

    fn check_epsilon(&self, x: &Tensor, epsilon: &Tensor) -> Result<()> {
        self.arch.check_input(x)?;
        if epsilon.shape() != [x.batch(), self.arch.latent_dim] {
            return Err(Error::invalid("epsilon must be [batch, latent_dim]"));
        }
        Ok(())
    }

    /// Backpropagates leaf gradients through all four networks, accumulating
    /// parameter gradients. `out` must come from the latest training forward.
    pub fn backward(&mut self, out: &BranchOutput, grads: OutputGradients) {
        let (d_recon_from_noise, mut d_label) = self.noise_decoder.backward(grads.noisy_logits);
        let mut d_recon = grads.reconstruction;
        d_recon.add_assign(&d_recon_from_noise);

        let (d_latent, d_label_dec) = self.instance_decoder.backward(d_recon);
        d_label.add_assign(&d_label_dec);

        let mut d_mean = grads.mean;
        d_mean.add_assign(&d_latent);
        let mut d_logvar = grads.log_variance;
        for (((g, dz), lv), e) in d_logvar
            .data_mut()
            .iter_mut()
            .zip(d_latent.data())
            .zip(out.gaussian.log_variance.data())
            .zip(out.epsilon.data())
        {
            *g += dz * 0.5 * libm::exp(0.5 * lv) * e;
        }
        let d_enc = Tensor::concat_columns(&d_mean, &d_logvar).expect("same batch");
        let (_, d_label_enc) = self.latent_encoder.backward(d_enc);
        d_label.add_assign(&d_label_enc);
        d_label.add_assign(&grads.soft_label);

        let d_logits = losses::softmax_backward(&out.soft_label, &d_label);
        self.label_encoder.backward(d_logits);
    }

    pub fn zero_grad(&mut self) {
        self.label_encoder.zero_grad();
        self.latent_encoder.zero_grad();
        self.instance_decoder.zero_grad();
        self.noise_decoder.zero_grad();
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.label_encoder.adam_step(cfg);
        self.latent_encoder.adam_step(cfg);
        self.instance_decoder.adam_step(cfg);
        self.noise_decoder.adam_step(cfg);
    }

    /// All parameters in a fixed order: label encoder, latent encoder,
    /// instance decoder, noise decoder.
    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.label_encoder.params();
        p.extend(self.latent_encoder.params());
        p.extend(self.instance_decoder.params());
        p.extend(self.noise_decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.label_encoder.params_mut();
        p.extend(self.latent_encoder.params_mut());
        p.extend(self.instance_decoder.params_mut());
        p.extend(self.noise_decoder.params_mut());
        p
    }
}

impl Predict for Branch {
    fn predict(&self, x: &Tensor) -> Vec<usize> {
        self.label_encoder.predict(x)
    }
}

/// Flattened parameter values in [`Branch::params`] / [`Classifier::params`] order.
pub fn flatten_params(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.iter().copied()).collect()
}

pub fn flatten_grads(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad.iter().copied()).collect()
}

/// Overwrites parameter values from a flat vector of exactly matching length.
pub fn load_params(params: Vec<&mut Param>, values: &[f64]) -> Result<()> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != values.len() {
        return Err(Error::ArchitectureMismatch(alloc::format!(
            "model has {total} parameters, got {}",
            values.len()
        )));
    }
    let mut offset = 0;
    for p in params {
        let n = p.len();
        p.value.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Short human-readable summary of a model's shape.
pub fn describe(arch: &Architecture) -> String {
    alloc::format!(
        "{} (m={}, C={}, J={})",
        arch.preset.name(),
        arch.feature_dim,
        arch.num_classes,
        arch.latent_dim
    )
}
