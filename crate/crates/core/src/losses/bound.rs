//! Monte Carlo checks of the evidence lower bound for a single instance.
//!
//! The generative model is taken with a uniform prior over the clean class,
//! `p(Z) = N(0, I)`, a factorised Laplace likelihood of unit scale centred
//! on the decoder output, and the noise decoder as `p(Ỹ | Y, X̂)`. The
//! variational family is `q(Y|X) q(Z|Y,X)` from the branch encoders, with
//! `Y` one-hot.

use alloc::vec;
use alloc::vec::Vec;

use super::{gaussian_log_density, kl_gauss, log_softmax, log_sum_exp, one_hot, standard_normal_log_density};
use crate::error::{Error, Result};
use crate::model::{reparameterize, standard_normal, Branch};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Scale `b` of the Laplace likelihood `p(x | y, z)`.
pub const LAPLACE_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

struct Draw {
    /// Decomposed ELBO integrand with closed-form KL terms.
    decomposed: f64,
    /// `log p(x, ỹ, y, z) - log q(y, z | x)`
    log_weight: f64,
}

pub fn laplace_log_likelihood(x: &[f64], centre: &[f64]) -> f64 {
    let b = LAPLACE_SCALE;
    -x.iter().zip(centre).map(|(a, c)| (a - c).abs()).sum::<f64>() / b - x.len() as f64 * libm::log(2.0 * b)
}

fn draws(branch: &Branch, x: &[f64], noisy_label: usize, samples: usize, rng: &mut Rng) -> Result<Vec<Draw>> {
    let arch = *branch.architecture();
    let c = arch.num_classes;
    if x.len() != arch.feature_dim || noisy_label >= c || samples < 2 {
        return Err(Error::invalid(
            "bound estimate needs a matching instance, valid label and >= 2 samples",
        ));
    }
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let log_q_y = log_softmax(branch.label_encoder.logits(&xt)?.row(0));
    let q_y: Vec<f64> = log_q_y.iter().map(|l| libm::exp(*l)).collect();
    let kl_y: f64 = q_y.iter().zip(&log_q_y).map(|(q, l)| q * l).sum::<f64>() + libm::log(c as f64);
    let log_prior_y = -libm::log(c as f64);

    let mut counts = vec![0usize; c];
    for _ in 0..samples {
        counts[crate::noise::sample_categorical(&q_y, rng)] += 1;
    }

    let mut out = Vec::with_capacity(samples);
    for (y, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let label = one_hot(1, c, y);
        let g = branch.encode_latent(&xt, &label);
        let (mu, lv) = (g.mean.row(0).to_vec(), g.log_variance.row(0).to_vec());
        let kl_z = kl_gauss(&mu, &lv);
        let rep = crate::model::GaussianParams {
            mean: Tensor::new(vec![n, mu.len()], mu.repeat(n))?,
            log_variance: Tensor::new(vec![n, lv.len()], lv.repeat(n))?,
        };
        let z = reparameterize(&rep, &standard_normal(vec![n, arch.latent_dim], rng));
        let labels = one_hot(n, c, y);
        let x_hat = branch.decode(&z, &labels);
        let noisy = branch.noise_logits(&x_hat, &labels);
        for i in 0..n {
            let log_px = laplace_log_likelihood(x, x_hat.row(i));
            let log_pnoisy = log_softmax(noisy.row(i))[noisy_label];
            let zi = z.row(i);
            out.push(Draw {
                decomposed: log_px + log_pnoisy - kl_z - kl_y,
                log_weight: log_prior_y + standard_normal_log_density(zi) + log_px + log_pnoisy
                    - log_q_y[y]
                    - gaussian_log_density(zi, &mu, &lv),
            });
        }
    }
    Ok(out)
}

fn mean_and_error(values: impl Iterator<Item = f64>) -> Estimate {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    Estimate {
        mean,
        std_error: libm::sqrt(var / n),
    }
}

/// ELBO with the KL terms in closed form and the expected log likelihoods by Monte Carlo.
pub fn elbo(branch: &Branch, x: &[f64], noisy_label: usize, samples: usize, rng: &mut Rng) -> Result<Estimate> {
    Ok(mean_and_error(
        draws(branch, x, noisy_label, samples, rng)?
            .into_iter()
            .map(|d| d.decomposed),
    ))
}

/// ELBO as the plain average of log importance weights.
pub fn elbo_direct(branch: &Branch, x: &[f64], noisy_label: usize, samples: usize, rng: &mut Rng) -> Result<Estimate> {
    Ok(mean_and_error(
        draws(branch, x, noisy_label, samples, rng)?
            .into_iter()
            .map(|d| d.log_weight),
    ))
}

/// Importance-sampled `log p(x, ỹ)` with a delta-method standard error.
pub fn importance_log_likelihood(
    branch: &Branch,
    x: &[f64],
    noisy_label: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<Estimate> {
    let w: Vec<f64> = draws(branch, x, noisy_label, samples, rng)?
        .into_iter()
        .map(|d| d.log_weight)
        .collect();
    let n = w.len() as f64;
    let lse = log_sum_exp(&w);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = w.iter().map(|v| libm::exp(v - max)).collect();
    let r_mean = r.iter().sum::<f64>() / n;
    let r_var = r.iter().map(|a| (a - r_mean) * (a - r_mean)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        mean: lse - libm::log(n),
        std_error: libm::sqrt(r_var / n) / r_mean,
    })
}
