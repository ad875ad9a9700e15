//! Metric logs: per-step ELBO terms, per-epoch metrics and run summaries.

use std::path::Path;

use causalnl_core::metrics::RunResult;
use causalnl_core::train::{EpochMetrics, Observer, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::formats::write_bytes;

#[derive(Debug, Serialize)]
struct StepRow {
    epoch: usize,
    step: usize,
    branch: usize,
    recon: f64,
    noisy_ce: f64,
    neg_entropy: f64,
    kl_gauss: f64,
    total: f64,
}

/// Collects ELBO rows `epoch,step,branch,recon,noisy_ce,neg_entropy,kl_gauss,total`
/// and optionally reports epochs on stderr.
pub struct MetricsLog {
    steps: csv::Writer<Vec<u8>>,
    error: Option<csv::Error>,
    verbose: bool,
}

impl MetricsLog {
    pub fn new(verbose: bool) -> Self {
        MetricsLog {
            steps: csv::Writer::from_writer(Vec::new()),
            error: None,
            verbose,
        }
    }

    pub fn step_csv(self) -> Result<Vec<u8>> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        let mut w = self.steps;
        if w.get_ref().is_empty() {
            w.write_record([
                "epoch",
                "step",
                "branch",
                "recon",
                "noisy_ce",
                "neg_entropy",
                "kl_gauss",
                "total",
            ])?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }
}

impl Observer for MetricsLog {
    fn on_step(&mut self, r: &StepRecord<'_>) {
        for (branch, b) in r.elbo.iter().enumerate() {
            let row = StepRow {
                epoch: r.epoch,
                step: r.step,
                branch,
                recon: b.recon,
                noisy_ce: b.noisy_ce,
                neg_entropy: b.neg_entropy,
                kl_gauss: b.kl_gauss,
                total: b.total,
            };
            if let Err(e) = self.steps.serialize(row) {
                self.error.get_or_insert(e);
            }
        }
    }

    fn on_epoch(&mut self, m: &EpochMetrics) {
        if self.verbose {
            let acc: Vec<String> = m.test_accuracy.iter().map(|a| format!("{:.4}", a)).collect();
            eprintln!(
                "epoch {:>3}  keep {:.3}  test acc {}",
                m.epoch + 1,
                m.keep_rate,
                acc.join(" / ")
            );
        }
    }
}

#[derive(Debug, Serialize)]
struct EpochRow {
    epoch: usize,
    model: usize,
    keep_rate: f64,
    train_loss: f64,
    recon: Option<f64>,
    noisy_ce: Option<f64>,
    neg_entropy: Option<f64>,
    kl_gauss: Option<f64>,
    test_accuracy: f64,
}

/// Per-epoch CSV, one row per (epoch, model):
/// `epoch,model,keep_rate,train_loss,recon,noisy_ce,neg_entropy,kl_gauss,test_accuracy`.
pub fn epoch_csv(history: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in history {
        for (model, acc) in m.test_accuracy.iter().enumerate() {
            let elbo = m.elbo.get(model);
            w.serialize(EpochRow {
                epoch: m.epoch,
                model,
                keep_rate: m.keep_rate,
                train_loss: m.train_loss[model],
                recon: elbo.map(|b| b.recon),
                noisy_ce: elbo.map(|b| b.noisy_ce),
                neg_entropy: elbo.map(|b| b.neg_entropy),
                kl_gauss: elbo.map(|b| b.kl_gauss),
                test_accuracy: *acc,
            })?;
        }
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

pub fn write_epoch_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    write_bytes(path, &epoch_csv(history)?)
}

/// Final summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub dataset: String,
    pub noise_kind: String,
    pub rate: f64,
    pub seed: u64,
    pub final_acc: f64,
    pub last10_acc: f64,
}

impl From<&RunResult> for Summary {
    fn from(r: &RunResult) -> Self {
        Summary {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            noise_kind: r.noise.kind.name().into(),
            rate: r.noise.rate,
            seed: r.seed,
            final_acc: r.final_accuracy(),
            last10_acc: r.last10_accuracy,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}
