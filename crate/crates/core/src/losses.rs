//! Loss terms of the weighted negative ELBO, co-teaching sample selection
//! and Monte Carlo estimators for the marginal likelihood bound.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BranchOutput, OutputGradients};
use crate::noise::TransitionMatrix;
use crate::tensor::Tensor;

pub mod bound;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.batch() {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = libm::exp(*v - lse);
        }
    }
    out
}

/// Vector-Jacobian product of a row-wise softmax: `q ⊙ (g - Σ q g)`.
pub fn softmax_backward(probs: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for i in 0..probs.batch() {
        let q = probs.row(i);
        let dot: f64 = q.iter().zip(grad.row(i)).map(|(a, b)| a * b).sum();
        for (o, qk) in out.row_mut(i).iter_mut().zip(q) {
            *o = qk * (*o - dot);
        }
    }
    out
}

/// Term weights `β0..β3` of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboWeights {
    pub reconstruction: f64,
    pub noisy_label: f64,
    pub entropy: f64,
    pub kl: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        ElboWeights {
            reconstruction: 0.1,
            noisy_label: 0.1,
            entropy: 1e-5,
            kl: 0.01,
        }
    }
}

impl ElboWeights {
    pub const UNIT: ElboWeights = ElboWeights {
        reconstruction: 1.0,
        noisy_label: 1.0,
        entropy: 1.0,
        kl: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.reconstruction, self.noisy_label, self.entropy, self.kl];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("ELBO weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub noisy_ce: f64,
    pub neg_entropy: f64,
    pub kl_gauss: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn from_terms(recon: f64, noisy_ce: f64, neg_entropy: f64, kl_gauss: f64, w: &ElboWeights) -> Self {
        ElboBreakdown {
            recon,
            noisy_ce,
            neg_entropy,
            kl_gauss,
            total: w.reconstruction * recon + w.noisy_label * noisy_ce + w.entropy * neg_entropy + w.kl * kl_gauss,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("noisy_ce", self.noisy_ce),
            ("neg_entropy", self.neg_entropy),
            ("kl_gauss", self.kl_gauss),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Mean absolute reconstruction error over the `m` features.
pub fn recon_l1(x: &[f64], reconstruction: &[f64]) -> Result<f64> {
    if x.len() != reconstruction.len() || x.is_empty() {
        return Err(Error::invalid("reconstruction length must match the instance"));
    }
    Ok(x.iter().zip(reconstruction).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// `-log softmax(logits)[label]`
pub fn noisy_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid("label out of range"));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// `Σ q log q` (zero-probability entries contribute 0).
pub fn neg_entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|q| !(*q >= 0.0)) {
        return Err(Error::invalid("probabilities must be non-negative"));
    }
    if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("probabilities must sum to 1"));
    }
    Ok(probs.iter().filter(|q| **q > 0.0).map(|q| q * libm::log(*q)).sum())
}

/// `KL(N(μ, diag σ²) || N(0, I))`
pub fn kl_gauss(mean: &[f64], log_variance: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_variance)
        .map(|(m, lv)| m * m + libm::exp(*lv) - 1.0 - lv)
        .sum::<f64>()
}

fn check_batch(x: &Tensor, out: &BranchOutput, noisy_labels: &[usize]) -> Result<()> {
    let b = x.batch();
    if b == 0 || noisy_labels.len() != b || out.reconstruction.shape() != x.shape() || out.noisy_logits.batch() != b {
        return Err(Error::invalid(
            "batch sizes of instances, labels and branch outputs differ",
        ));
    }
    let c = out.noisy_logits.row_len();
    if noisy_labels.iter().any(|&l| l >= c) {
        return Err(Error::invalid("noisy label out of range"));
    }
    Ok(())
}

/// Per-sample breakdowns of the weighted negative ELBO.
pub fn negative_elbo_per_sample(
    x: &Tensor,
    out: &BranchOutput,
    noisy_labels: &[usize],
    w: &ElboWeights,
) -> Result<Vec<ElboBreakdown>> {
    check_batch(x, out, noisy_labels)?;
    (0..x.batch())
        .map(|i| {
            let recon = recon_l1(x.row(i), out.reconstruction.row(i))?;
            let ce = noisy_ce(out.noisy_logits.row(i), noisy_labels[i])?;
            let log_q = log_softmax(out.label_logits.row(i));
            let ne = log_q.iter().map(|l| libm::exp(*l) * l).sum();
            let kl = kl_gauss(out.gaussian.mean.row(i), out.gaussian.log_variance.row(i));
            Ok(ElboBreakdown::from_terms(recon, ce, ne, kl, w))
        })
        .collect()
}

/// Batch mean of the weighted negative ELBO.
pub fn negative_elbo(x: &Tensor, out: &BranchOutput, noisy_labels: &[usize], w: &ElboWeights) -> Result<ElboBreakdown> {
    Ok(mean_breakdown(&negative_elbo_per_sample(x, out, noisy_labels, w)?))
}

pub fn mean_breakdown(items: &[ElboBreakdown]) -> ElboBreakdown {
    let n = items.len().max(1) as f64;
    let mut acc = ElboBreakdown::default();
    for b in items {
        acc.recon += b.recon / n;
        acc.noisy_ce += b.noisy_ce / n;
        acc.neg_entropy += b.neg_entropy / n;
        acc.kl_gauss += b.kl_gauss / n;
        acc.total += b.total / n;
    }
    acc
}

/// Batch-mean negative ELBO together with its derivatives with respect to
/// the branch outputs, ready for [`crate::model::Branch::backward`].
pub fn negative_elbo_with_gradients(
    x: &Tensor,
    out: &BranchOutput,
    noisy_labels: &[usize],
    w: &ElboWeights,
) -> Result<(ElboBreakdown, OutputGradients)> {
    let breakdown = negative_elbo(x, out, noisy_labels, w)?;
    let b = x.batch() as f64;
    let m = x.row_len() as f64;

    let mut reconstruction = out.reconstruction.clone();
    for (g, xi) in reconstruction.data_mut().iter_mut().zip(x.data()) {
        let d = *g - xi;
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = w.reconstruction * sign / (m * b);
    }

    let mut noisy_logits = softmax_rows(&out.noisy_logits);
    for (i, &label) in noisy_labels.iter().enumerate() {
        let row = noisy_logits.row_mut(i);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= w.noisy_label / b;
        }
    }

    let mut soft_label = out.label_logits.clone();
    for i in 0..soft_label.batch() {
        let row = soft_label.row_mut(i);
        let log_q = log_softmax(row);
        for (v, lq) in row.iter_mut().zip(log_q) {
            *v = w.entropy * (lq + 1.0) / b;
        }
    }

    let mean = out.gaussian.mean.map(|mu| w.kl * mu / b);
    let log_variance = out
        .gaussian
        .log_variance
        .map(|lv| w.kl * 0.5 * (libm::exp(lv) - 1.0) / b);

    Ok((
        breakdown,
        OutputGradients {
            noisy_logits,
            reconstruction,
            soft_label,
            mean,
            log_variance,
        },
    ))
}

/// Per-sample cross-entropy of `logits` against `labels`.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.batch() != labels.len() {
        return Err(Error::invalid("one label per logit row required"));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| noisy_ce(logits.row(i), l))
        .collect()
}

/// Gradient of the mean cross-entropy over the `selected` rows; other rows get zero.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize], selected: &[usize]) -> Tensor {
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let n = selected.len().max(1) as f64;
    for &i in selected {
        let lse = log_sum_exp(logits.row(i));
        let row = grad.row_mut(i);
        for (g, v) in row.iter_mut().zip(logits.row(i)) {
            *g = libm::exp(v - lse) / n;
        }
        row[labels[i]] -= 1.0 / n;
    }
    grad
}

/// `log (Tᵀ softmax(logits))[label]` for one row, computed in log space.
fn forward_log_noisy(logits: &[f64], t: &TransitionMatrix, label: usize) -> (Vec<f64>, f64) {
    let log_p = log_softmax(logits);
    let terms: Vec<f64> = log_p
        .iter()
        .enumerate()
        .map(|(i, lp)| {
            let tij = t.get(i, label);
            if tij > 0.0 {
                lp + libm::log(tij)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let log_r = log_sum_exp(&terms);
    (terms, log_r)
}

fn check_transition(logits: &Tensor, labels: &[usize], t: &TransitionMatrix) -> Result<()> {
    if logits.batch() != labels.len() || t.num_classes() != logits.row_len() {
        return Err(Error::invalid("transition matrix, logits and labels disagree in size"));
    }
    if labels.iter().any(|&l| l >= t.num_classes()) {
        return Err(Error::invalid("label out of range"));
    }
    Ok(())
}

/// Forward-corrected cross-entropy `-log (Tᵀ softmax(logits))[ỹ]` per sample.
pub fn forward_corrected_ce(logits: &Tensor, labels: &[usize], t: &TransitionMatrix) -> Result<Vec<f64>> {
    check_transition(logits, labels, t)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -forward_log_noisy(logits.row(i), t, l).1)
        .collect())
}

/// Gradient of the mean forward-corrected loss over the `selected` rows.
pub fn forward_corrected_grad(logits: &Tensor, labels: &[usize], t: &TransitionMatrix, selected: &[usize]) -> Tensor {
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let n = selected.len().max(1) as f64;
    for &i in selected {
        let (terms, log_r) = forward_log_noisy(logits.row(i), t, labels[i]);
        let log_p = log_softmax(logits.row(i));
        for ((g, lp), term) in grad.row_mut(i).iter_mut().zip(log_p).zip(terms) {
            *g = (libm::exp(lp) - libm::exp(term - log_r)) / n;
        }
    }
    grad
}

/// Linear keep-rate schedule `R(e) = 1 - ρ·min(e / T_k, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeepRateSchedule {
    pub forget_rate: f64,
    pub warmup_epochs: usize,
}

impl KeepRateSchedule {
    pub const DEFAULT_WARMUP_EPOCHS: usize = 10;

    pub fn new(forget_rate: f64) -> Self {
        KeepRateSchedule {
            forget_rate,
            warmup_epochs: Self::DEFAULT_WARMUP_EPOCHS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.forget_rate) {
            return Err(Error::invalid("forget rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn keep_rate(&self, epoch: usize) -> f64 {
        let progress = if self.warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        };
        1.0 - self.forget_rate * progress
    }
}

/// Indices of the `⌈keep·n⌉` smallest losses (ties to the smaller index),
/// returned in ascending index order.
pub fn small_loss_select(losses: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid("keep fraction must lie in (0, 1]"));
    }
    if losses.is_empty() {
        return Err(Error::invalid("no losses to select from"));
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::invalid("losses must not be NaN"));
    }
    let n = losses.len();
    let keep = libm::ceil(keep_fraction * n as f64 - 1e-9).clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `log N(v; μ, σ²)` summed over a diagonal Gaussian.
pub fn gaussian_log_density(v: &[f64], mean: &[f64], log_variance: &[f64]) -> f64 {
    v.iter()
        .zip(mean)
        .zip(log_variance)
        .map(|((v, m), lv)| -0.5 * (LN_2PI + lv + (v - m) * (v - m) * libm::exp(-lv)))
        .sum()
}

/// Standard normal log density summed over the coordinates.
pub fn standard_normal_log_density(v: &[f64]) -> f64 {
    v.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum()
}

pub(crate) fn one_hot(batch: usize, classes: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![batch, classes]);
    for i in 0..batch {
        t.row_mut(i)[class] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Branch};
    use crate::nn::gradcheck::assert_close;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn weighted_total_example() {
        let ln10 = libm::log(10.0);
        let b = ElboBreakdown::from_terms(1.0, ln10, -ln10, 0.5, &ElboWeights::default());
        let expected = 0.1 + 0.1 * ln10 - 1e-5 * ln10 + 0.01 * 0.5;
        assert!((b.total - expected).abs() < 1e-15);
        assert!((b.total - 0.335236).abs() < 1e-6);
        let zero = ElboBreakdown::from_terms(0.0, 0.0, 0.0, 0.0, &ElboWeights::default());
        assert_eq!(zero.total, 0.0);
        let doubled = ElboWeights {
            kl: 0.02,
            ..ElboWeights::default()
        };
        let d = ElboBreakdown::from_terms(1.0, ln10, -ln10, 0.5, &doubled);
        assert!((d.total - b.total - 0.01 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_correction_with_identity_is_cross_entropy() {
        let logits = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.0, 0.5, -0.5]]).unwrap();
        let labels = [2, 0];
        let id = TransitionMatrix::identity(3);
        let a = forward_corrected_ce(&logits, &labels, &id).unwrap();
        let b = cross_entropy_per_sample(&logits, &labels).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let ga = forward_corrected_grad(&logits, &labels, &id, &[0, 1]);
        let gb = cross_entropy_grad(&logits, &labels, &[0, 1]);
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn term_examples() {
        assert_eq!(recon_l1(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(kl_gauss(&[0.0], &[0.0]), 0.0);
        assert!((kl_gauss(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert!((noisy_ce(&[0.0; 10], 3).unwrap() - libm::log(10.0)).abs() < 1e-12);
        assert!((kl_gauss(&[0.0], &[1.0]) - (core::f64::consts::E - 2.0) / 2.0).abs() < 1e-12);
        assert_eq!(recon_l1(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(recon_l1(&[0.5], &[0.25]).unwrap(), 0.25);
        assert!(recon_l1(&[0.5], &[0.25, 1.0]).is_err());
        assert!((noisy_ce(&[0.0, 0.0], 0).unwrap() - libm::log(2.0)).abs() < 1e-12);
        assert!(noisy_ce(&[0.0, -800.0], 0).unwrap().abs() < 1e-12);
        assert!((neg_entropy(&[0.1; 10]).unwrap() + libm::log(10.0)).abs() < 1e-12);
        assert!((neg_entropy(&[0.5, 0.5]).unwrap() + libm::log(2.0)).abs() < 1e-12);
        assert_eq!(neg_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!(neg_entropy(&[1.5, -0.5]).is_err());
        assert!(noisy_ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(small_loss_select(&[0.9, 0.1, 0.5, 0.3], 0.5).unwrap(), vec![1, 3]);
        assert_eq!(small_loss_select(&[0.1, 5.0, 0.2, 3.0], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(small_loss_select(&[1.0, 1.0, 2.0], 1.0 / 3.0).unwrap(), vec![0]);
        assert_eq!(small_loss_select(&[3.0, 1.0, 2.0], 1.0).unwrap(), vec![0, 1, 2]);
        assert!(small_loss_select(&[], 0.5).is_err());
        assert_eq!(small_loss_select(&[1.0; 100], 0.55).unwrap().len(), 55);
        assert!(small_loss_select(&[1.0], 0.0).is_err());
        assert!(small_loss_select(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn keep_rate_examples() {
        let s = KeepRateSchedule::new(0.45);
        assert!((s.keep_rate(0) - 1.0).abs() < 1e-12);
        assert!((s.keep_rate(5) - 0.775).abs() < 1e-12);
        assert!((s.keep_rate(10) - 0.55).abs() < 1e-12);
        assert!((s.keep_rate(50) - 0.55).abs() < 1e-12);
    }

    fn kl_by_quadrature(mu: f64, lv: f64) -> f64 {
        // Trapezoid integral of q log(q/p) on a wide grid.
        let sd = libm::exp(0.5 * lv);
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        (0..=n)
            .map(|k| {
                let v = lo + k as f64 * h;
                let lq = gaussian_log_density(&[v], &[mu], &[lv]);
                let lp = standard_normal_log_density(&[v]);
                let weight = if k == 0 || k == n { 0.5 } else { 1.0 };
                weight * libm::exp(lq) * (lq - lp)
            })
            .sum::<f64>()
            * h
    }

    proptest! {
        #[test]
        fn kl_non_negative_and_matches_quadrature(mu in -3.0f64..3.0, lv in -3.0f64..2.0) {
            let kl = kl_gauss(&[mu], &[lv]);
            prop_assert!(kl >= 0.0);
            prop_assert!((kl - kl_by_quadrature(mu, lv)).abs() < 1e-6);
        }

        #[test]
        fn neg_entropy_bounds(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let q: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
            let ne = neg_entropy(&q).unwrap();
            prop_assert!(ne <= 1e-12);
            prop_assert!(ne >= -libm::log(q.len() as f64) - 1e-9);
        }

        #[test]
        fn selection_matches_full_sort(losses in prop::collection::vec(0u8..6, 1..40), keep in 0.01f64..=1.0) {
            let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
            let got = small_loss_select(&losses, keep).unwrap();
            let k = libm::ceil(keep * losses.len() as f64 - 1e-9) as usize;
            prop_assert_eq!(got.len(), k);
            // Every chosen loss is <= every rejected loss; ties prefer lower indices.
            for &c in &got {
                for r in (0..losses.len()).filter(|r| !got.contains(r)) {
                    prop_assert!(losses[c] < losses[r] || (losses[c] == losses[r] && c < r));
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[[1000.0, 0.0, -5.0], [0.1, 0.2, 0.3]]).unwrap();
        for row in softmax_rows(&t).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    fn total_for(branch: &Branch, x: &Tensor, eps: &Tensor, labels: &[usize], w: &ElboWeights) -> f64 {
        let out = branch.infer_with_epsilon(x, eps.clone()).unwrap();
        negative_elbo(x, &out, labels, w).unwrap().total
    }

    #[test]
    fn branch_gradient_matches_finite_differences() {
        let mut r = rng::derive(11, &[]);
        let arch = Architecture::mlp(3, 3, 2).with_hidden_width(5);
        let mut branch = Branch::new(arch, &mut r).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.7, 0.2], [1.1, 0.4, -0.5], [-0.2, 0.9, 0.8]]).unwrap();
        let eps = Tensor::from_rows(&[[0.5, -1.2], [0.3, 0.8], [-0.4, 0.1]]).unwrap();
        let labels = [0, 2, 1];
        let w = ElboWeights {
            reconstruction: 0.7,
            noisy_label: 1.3,
            entropy: 0.4,
            kl: 0.9,
        };
        branch.zero_grad();
        let out = branch.forward_with_epsilon(&x, eps.clone()).unwrap();
        let (_, grads) = negative_elbo_with_gradients(&x, &out, &labels, &w).unwrap();
        branch.backward(&out, grads);
        let analytic = crate::model::flatten_grads(&branch.params());

        let n = analytic.len();
        let h = 1e-6;
        let mut checked = 0;
        for k in (0..n).step_by(3) {
            let mut probe = branch.clone();
            let mut values = crate::model::flatten_params(&probe.params());
            values[k] += h;
            crate::model::load_params(probe.params_mut(), &values).unwrap();
            let plus = total_for(&probe, &x, &eps, &labels, &w);
            values[k] -= 2.0 * h;
            crate::model::load_params(probe.params_mut(), &values).unwrap();
            let minus = total_for(&probe, &x, &eps, &labels, &w);
            let numeric = (plus - minus) / (2.0 * h);
            assert_close(analytic[k], numeric, 2e-5);
            checked += 1;
        }
        assert!(checked > 30);
    }
}
