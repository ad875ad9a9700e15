//! The dual-branch CausalNL training loop and the baseline trainers.
//!
//! Every trainer draws batches, augmentation offsets, initial weights and
//! reparameterization noise from streams derived from [`TrainConfig::seed`],
//! so a run is a pure function of its inputs on a given backend.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasets::{augment, Augmentation, BatchIterator, LabeledDataset, NoisyDataset};
use crate::error::{Error, Result};
use crate::losses::{self, ElboBreakdown, ElboWeights, KeepRateSchedule};
use crate::metrics::accuracy;
use crate::model::{Architecture, Branch, Classifier, Predict, Preset, DEFAULT_HIDDEN_WIDTH};
use crate::nn::AdamConfig;
use crate::noise::TransitionMatrix;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Consecutive non-finite steps tolerated before a run is aborted.
pub const DIVERGENCE_PATIENCE: usize = 3;

const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "causalnl")]
    CausalNl,
    Ce,
    #[serde(rename = "coteaching")]
    CoTeaching,
    Forward,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CausalNl, Method::Ce, Method::CoTeaching, Method::Forward];

    pub fn name(&self) -> &'static str {
        match self {
            Method::CausalNl => "causalnl",
            Method::Ce => "ce",
            Method::CoTeaching => "coteaching",
            Method::Forward => "forward",
        }
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: ElboWeights,
    pub schedule: KeepRateSchedule,
    pub latent_dim: usize,
    pub seed: u64,
    pub preset: Preset,
    pub hidden_width: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// Defaults for the two-moons data: 100 epochs, `J = 1`, fully connected nets.
    pub fn moon(noise_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            weights: ElboWeights::default(),
            schedule: KeepRateSchedule::new(noise_rate),
            latent_dim: 1,
            seed,
            preset: Preset::Mlp2d,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            augment: false,
        }
    }

    /// Defaults for small grayscale image subsets: 30 epochs, `J = 25`, conv nets.
    pub fn small_image(noise_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            latent_dim: 25,
            preset: Preset::ConvSmall,
            ..TrainConfig::moon(noise_rate, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        self.weights.validate()?;
        self.schedule.validate()
    }

    pub fn architecture(&self, data: &NoisyDataset) -> Result<Architecture> {
        let arch = match self.preset {
            Preset::Mlp2d => Architecture::mlp(data.feature_dim(), data.num_classes(), self.latent_dim),
            Preset::ConvSmall => Architecture::conv_small(
                data.image_shape()
                    .ok_or_else(|| Error::invalid("conv-small preset needs image data"))?,
                data.num_classes(),
                self.latent_dim,
            ),
        }
        .with_hidden_width(self.hidden_width);
        arch.validate()?;
        Ok(arch)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }
}

/// Summary of one training epoch. Index `k` of each vector refers to model
/// `k` (branch or peer classifier); index 0 is the reported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub keep_rate: f64,
    /// Mean training objective per model over the epoch's batches.
    pub train_loss: Vec<f64>,
    /// Mean ELBO terms per branch (CausalNL only).
    pub elbo: Vec<ElboBreakdown>,
    pub test_accuracy: Vec<f64>,
}

/// What happened in one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Dataset indices in the batch.
    pub batch: &'a [usize],
    pub keep_rate: f64,
    /// Per-sample classification loss of each model on the batch.
    pub sample_losses: &'a [Vec<f64>],
    /// Batch positions each model's classification update used.
    pub trained_on: &'a [Vec<usize>],
    /// ELBO breakdown per branch (CausalNL only).
    pub elbo: &'a [ElboBreakdown],
}

/// Hooks for logging; the unit type ignores everything.
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord<'_>) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl Observer for () {}

/// Clean test accuracy of a model, evaluated in chunks.
pub fn evaluate(model: &dyn Predict, test: &LabeledDataset) -> Result<f64> {
    let mut predictions = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        predictions.extend(model.predict(&test.instances().select(chunk)));
    }
    accuracy(&predictions, test.labels())
}

struct DivergenceGuard {
    streak: usize,
}

impl DivergenceGuard {
    /// Records whether a step was finite; errors after too many bad steps in a row.
    fn record(&mut self, epoch: usize, step: usize, bad_term: Option<&str>) -> Result<()> {
        match bad_term {
            None => {
                self.streak = 0;
                Ok(())
            }
            Some(term) => {
                self.streak += 1;
                if self.streak >= DIVERGENCE_PATIENCE {
                    Err(Error::Diverged {
                        epoch,
                        step,
                        term: String::from(term),
                    })
                } else {
                    Ok(())
                }
            }
        }
    }
}

struct Pipeline<'a> {
    train: &'a NoisyDataset,
    cfg: &'a TrainConfig,
    batches: BatchIterator,
}

impl<'a> Pipeline<'a> {
    fn new(train: &'a NoisyDataset, test: &LabeledDataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.feature_dim() != test.feature_dim() || train.num_classes() != test.num_classes() {
            return Err(Error::invalid(
                "train and test sets differ in feature dimension or classes",
            ));
        }
        if cfg.augment && train.image_shape().is_none() {
            return Err(Error::invalid("augmentation requires image data"));
        }
        let shuffle_seed = rng::derive_seed(cfg.seed, &[stream::SHUFFLE]);
        Ok(Pipeline {
            train,
            cfg,
            batches: BatchIterator::new(train.len(), cfg.batch_size, shuffle_seed)?,
        })
    }

    fn batch(&self, indices: &[usize], epoch: usize, step: usize) -> Result<(Tensor, Vec<usize>)> {
        let mut x = self.train.instances().select(indices);
        if self.cfg.augment {
            let seed = rng::derive_seed(self.cfg.seed, &[stream::AUGMENT, epoch as u64, step as u64]);
            x = augment(
                &x,
                self.train.image_shape(),
                &[Augmentation::RandomCrop, Augmentation::HorizontalFlip],
                seed,
            )?;
        }
        let noisy = self.train.noisy_labels();
        Ok((x, indices.iter().map(|&i| noisy[i]).collect()))
    }
}

fn first_non_finite(values: &[Vec<f64>], term: &'static str) -> Option<&'static str> {
    values.iter().any(|v| v.iter().any(|l| !l.is_finite())).then_some(term)
}

fn mean_over(values: &[f64], indices: &[usize]) -> f64 {
    indices.iter().map(|&i| values[i]).sum::<f64>() / indices.len().max(1) as f64
}

/// Trains two CausalNL branches that co-teach through their label encoders.
/// Branch 0 is the reported model.
pub fn train_causalnl(
    train: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<([Branch; 2], Vec<EpochMetrics>)> {
    let pipeline = Pipeline::new(train, test, cfg)?;
    let arch = cfg.architecture(train)?;
    let mut branches = [
        Branch::new(arch, &mut rng::derive(cfg.seed, &[stream::INIT, 0]))?,
        Branch::new(arch, &mut rng::derive(cfg.seed, &[stream::INIT, 1]))?,
    ];
    let mut eps = [
        rng::derive(cfg.seed, &[stream::EPSILON, 0]),
        rng::derive(cfg.seed, &[stream::EPSILON, 1]),
    ];
    let adam = cfg.adam();
    let mut guard = DivergenceGuard { streak: 0 };
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let keep = cfg.schedule.keep_rate(epoch);
        let mut elbo_terms: [Vec<ElboBreakdown>; 2] = [Vec::new(), Vec::new()];
        for (step, indices) in pipeline.batches.epoch(epoch).iter().enumerate() {
            let (x, y) = pipeline.batch(indices, epoch, step)?;

            let mut logits = Vec::with_capacity(2);
            for b in branches.iter_mut() {
                logits.push(b.label_encoder.forward(&x)?);
            }
            let ce = logits
                .iter()
                .map(|l| losses::cross_entropy_per_sample(l, &y))
                .collect::<Result<Vec<_>>>()?;
            let mut bad = first_non_finite(&ce, "coteaching_ce");
            let mut trained_on = vec![Vec::new(), Vec::new()];
            if bad.is_none() {
                let chosen = [
                    losses::small_loss_select(&ce[0], keep)?,
                    losses::small_loss_select(&ce[1], keep)?,
                ];
                trained_on = vec![chosen[1].clone(), chosen[0].clone()];
                for (k, b) in branches.iter_mut().enumerate() {
                    b.label_encoder.zero_grad();
                    b.label_encoder
                        .backward(losses::cross_entropy_grad(&logits[k], &y, &trained_on[k]));
                    b.label_encoder.adam_step(&adam);
                }
            }

            let mut step_elbo = Vec::with_capacity(2);
            if bad.is_none() {
                for (b, e) in branches.iter_mut().zip(eps.iter_mut()) {
                    b.zero_grad();
                    let out = b.forward(&x, e)?;
                    let (breakdown, grads) = losses::negative_elbo_with_gradients(&x, &out, &y, &cfg.weights)?;
                    step_elbo.push(breakdown);
                    if let Some(term) = breakdown.non_finite_term() {
                        bad = Some(term);
                        continue;
                    }
                    b.backward(&out, grads);
                    b.adam_step(&adam);
                }
            }
            guard.record(epoch, step, bad)?;
            if bad.is_none() {
                for (acc, b) in elbo_terms.iter_mut().zip(&step_elbo) {
                    acc.push(*b);
                }
            }
            observer.on_step(&StepRecord {
                epoch,
                step,
                batch: indices,
                keep_rate: keep,
                sample_losses: &ce,
                trained_on: &trained_on,
                elbo: &step_elbo,
            });
        }
        let elbo: Vec<ElboBreakdown> = elbo_terms.iter().map(|t| losses::mean_breakdown(t)).collect();
        let metrics = EpochMetrics {
            epoch,
            keep_rate: keep,
            train_loss: elbo.iter().map(|b| b.total).collect(),
            elbo,
            test_accuracy: branches.iter().map(|b| evaluate(b, test)).collect::<Result<Vec<_>>>()?,
        };
        observer.on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((branches, history))
}

#[derive(Clone, Copy)]
enum ClassLoss<'a> {
    CrossEntropy,
    Forward(&'a TransitionMatrix),
}

impl ClassLoss<'_> {
    fn per_sample(&self, logits: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
        match self {
            ClassLoss::CrossEntropy => losses::cross_entropy_per_sample(logits, y),
            ClassLoss::Forward(t) => losses::forward_corrected_ce(logits, y, t),
        }
    }

    fn grad(&self, logits: &Tensor, y: &[usize], selected: &[usize]) -> Tensor {
        match self {
            ClassLoss::CrossEntropy => losses::cross_entropy_grad(logits, y, selected),
            ClassLoss::Forward(t) => losses::forward_corrected_grad(logits, y, t, selected),
        }
    }
}

fn train_classifiers(
    train: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    models: usize,
    loss: ClassLoss<'_>,
    observer: &mut dyn Observer,
) -> Result<(Vec<Classifier>, Vec<EpochMetrics>)> {
    let pipeline = Pipeline::new(train, test, cfg)?;
    let arch = cfg.architecture(train)?;
    let mut nets = (0..models)
        .map(|k| Classifier::new(arch, &mut rng::derive(cfg.seed, &[stream::INIT, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let coteach = models == 2;
    let adam = cfg.adam();
    let mut guard = DivergenceGuard { streak: 0 };
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let keep = if coteach { cfg.schedule.keep_rate(epoch) } else { 1.0 };
        let mut loss_sums = vec![0.0; models];
        let mut good_steps = 0usize;
        for (step, indices) in pipeline.batches.epoch(epoch).iter().enumerate() {
            let (x, y) = pipeline.batch(indices, epoch, step)?;
            let mut logits = Vec::with_capacity(models);
            for n in nets.iter_mut() {
                logits.push(n.forward(&x)?);
            }
            let sample_losses = logits
                .iter()
                .map(|l| loss.per_sample(l, &y))
                .collect::<Result<Vec<_>>>()?;
            let bad = first_non_finite(&sample_losses, "classification_loss");
            let mut trained_on: Vec<Vec<usize>> = vec![Vec::new(); models];
            if bad.is_none() {
                trained_on = if coteach {
                    let chosen = [
                        losses::small_loss_select(&sample_losses[0], keep)?,
                        losses::small_loss_select(&sample_losses[1], keep)?,
                    ];
                    vec![chosen[1].clone(), chosen[0].clone()]
                } else {
                    vec![(0..y.len()).collect()]
                };
                for (k, n) in nets.iter_mut().enumerate() {
                    n.zero_grad();
                    n.backward(loss.grad(&logits[k], &y, &trained_on[k]));
                    n.adam_step(&adam);
                    loss_sums[k] += mean_over(&sample_losses[k], &trained_on[k]);
                }
                good_steps += 1;
            }
            guard.record(epoch, step, bad)?;
            observer.on_step(&StepRecord {
                epoch,
                step,
                batch: indices,
                keep_rate: keep,
                sample_losses: &sample_losses,
                trained_on: &trained_on,
                elbo: &[],
            });
        }
        let metrics = EpochMetrics {
            epoch,
            keep_rate: keep,
            train_loss: loss_sums.iter().map(|s| s / good_steps.max(1) as f64).collect(),
            elbo: Vec::new(),
            test_accuracy: nets.iter().map(|n| evaluate(n, test)).collect::<Result<Vec<_>>>()?,
        };
        observer.on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((nets, history))
}

/// Plain cross-entropy on the noisy labels.
pub fn train_ce(
    train: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<(Classifier, Vec<EpochMetrics>)> {
    let (mut nets, history) = train_classifiers(train, test, cfg, 1, ClassLoss::CrossEntropy, observer)?;
    Ok((nets.remove(0), history))
}

/// Two peer classifiers exchanging small-loss subsets.
pub fn train_coteaching(
    train: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<([Classifier; 2], Vec<EpochMetrics>)> {
    let (nets, history) = train_classifiers(train, test, cfg, 2, ClassLoss::CrossEntropy, observer)?;
    let [a, b]: [Classifier; 2] = nets
        .try_into()
        .map_err(|_| Error::Consistency("expected two peers".into()))?;
    Ok(([a, b], history))
}

/// Cross-entropy against `Tᵀ softmax(logits)` for a known transition matrix.
pub fn train_forward(
    train: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    t: &TransitionMatrix,
    observer: &mut dyn Observer,
) -> Result<(Classifier, Vec<EpochMetrics>)> {
    if t.num_classes() != train.num_classes() {
        return Err(Error::invalid("transition matrix size does not match the class count"));
    }
    let rows: Vec<&[f64]> = (0..t.num_classes()).map(|i| t.row(i)).collect();
    TransitionMatrix::from_rows(&rows)?;
    let (mut nets, history) = train_classifiers(train, test, cfg, 1, ClassLoss::Forward(t), observer)?;
    Ok((nets.remove(0), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_moon;
    use crate::noise::{synthesize, NoiseKind, NoiseSpec};

    fn moon_data(n: usize, rate: f64) -> (NoisyDataset, LabeledDataset) {
        let train = generate_moon(n, 0.1, 1).unwrap();
        let test = generate_moon(200, 0.1, 2).unwrap();
        let noisy = synthesize(&train, &NoiseSpec::new(NoiseKind::InstanceDependent, rate, 3)).unwrap();
        (noisy.without_clean_labels(), test)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            hidden_width: 8,
            ..TrainConfig::moon(0.3, 9)
        }
    }

    #[test]
    fn rejects_zero_epochs() {
        let (train, test) = moon_data(64, 0.3);
        let cfg = tiny_cfg(0);
        assert!(matches!(
            train_causalnl(&train, &test, &cfg, &mut ()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(train_ce(&train, &test, &cfg, &mut ()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("mixup".parse::<Method>().is_err());
    }

    #[derive(Default)]
    struct Log {
        steps: Vec<(Vec<Vec<f64>>, Vec<Vec<usize>>, f64)>,
    }

    impl Observer for Log {
        fn on_step(&mut self, r: &StepRecord<'_>) {
            self.steps
                .push((r.sample_losses.to_vec(), r.trained_on.to_vec(), r.keep_rate));
        }
    }

    #[test]
    fn coteaching_exchange_is_symmetric() {
        let (train, test) = moon_data(96, 0.3);
        let mut log = Log::default();
        let cfg = TrainConfig {
            schedule: KeepRateSchedule {
                forget_rate: 0.3,
                warmup_epochs: 1,
            },
            ..tiny_cfg(2)
        };
        train_causalnl(&train, &test, &cfg, &mut log).unwrap();
        assert_eq!(log.steps.len(), 6);
        for (losses_k, trained, keep) in &log.steps {
            assert_eq!(trained[0], losses::small_loss_select(&losses_k[1], *keep).unwrap());
            assert_eq!(trained[1], losses::small_loss_select(&losses_k[0], *keep).unwrap());
            let expected = libm::ceil(keep * 32.0 - 1e-9) as usize;
            assert_eq!(trained[0].len(), expected);
        }
        assert_eq!(train.clean_label_reads(), 0);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, test) = moon_data(64, 0.3);
        let cfg = tiny_cfg(2);
        let (_, a) = train_causalnl(&train, &test, &cfg, &mut ()).unwrap();
        let (_, b) = train_causalnl(&train, &test, &cfg, &mut ()).unwrap();
        assert_eq!(a, b);
        let (_, c) = train_coteaching(&train, &test, &cfg, &mut ()).unwrap();
        let (_, d) = train_coteaching(&train, &test, &cfg, &mut ()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c[0].keep_rate, 1.0);
        assert!((c[1].keep_rate - 0.97).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_size_matrix() {
        let (train, test) = moon_data(64, 0.3);
        let t = TransitionMatrix::identity(3);
        assert!(train_forward(&train, &test, &tiny_cfg(1), &t, &mut ()).is_err());
    }
}
