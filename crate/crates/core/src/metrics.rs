//! Accuracy, the last-k reporting protocol, aggregation across repeats and
//! decision lattices for 2D classifiers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predict;
use crate::noise::NoiseSpec;
use crate::tensor::Tensor;

/// Number of final epochs averaged for the reported accuracy.
pub const REPORT_LAST_K: usize = 10;

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::invalid(
            "accuracy needs two nonempty label lists of equal length",
        ));
    }
    let hits = predictions.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean of the final `min(k, len)` values.
pub fn last_k_mean(series: &[f64], k: usize) -> Result<f64> {
    if k == 0 || series.is_empty() {
        return Err(Error::invalid("last_k_mean needs k >= 1 and a nonempty series"));
    }
    let tail = &series[series.len() - k.min(series.len())..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("empty group"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, libm::sqrt(var)))
}

/// One trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub dataset: String,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Per-epoch clean test accuracy of the reported model.
    pub accuracy: Vec<f64>,
    /// Per-epoch accuracy of the peer model, for two-model methods.
    #[serde(default)]
    pub peer_accuracy: Option<Vec<f64>>,
    pub last10_accuracy: f64,
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn new(method: &str, dataset: &str, noise: NoiseSpec, seed: u64, accuracy: Vec<f64>) -> Result<Self> {
        let last10_accuracy = last_k_mean(&accuracy, REPORT_LAST_K)?;
        Ok(RunResult {
            method: method.into(),
            dataset: dataset.into(),
            noise,
            seed,
            accuracy,
            peer_accuracy: None,
            last10_accuracy,
            wall_time_secs: 0.0,
        })
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Statistics of one (method, dataset, noise kind, rate) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub noise_kind: String,
    pub rate: f64,
    pub repeats: usize,
    /// Mean over repeats of the last-10 accuracy.
    pub mean: f64,
    /// Sample standard deviation of the last-10 accuracy across repeats.
    pub std: f64,
    /// Within-run standard deviation over the last 10 epochs, averaged over repeats.
    pub epoch_std: f64,
}

/// Groups results by method and noise level, in sorted key order.
pub fn aggregate(results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    if results.is_empty() {
        return Err(Error::invalid("no results to aggregate"));
    }
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        let key = (
            r.method.clone(),
            r.dataset.clone(),
            String::from(r.noise.kind.name()),
            r.noise.rate.to_bits(),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, dataset, noise_kind, rate), runs)| {
            let last: Vec<f64> = runs.iter().map(|r| r.last10_accuracy).collect();
            let (mean, std) = mean_std(&last)?;
            let mut epoch_std = 0.0;
            for r in &runs {
                let tail = &r.accuracy[r.accuracy.len() - REPORT_LAST_K.min(r.accuracy.len())..];
                epoch_std += mean_std(tail)?.1 / runs.len() as f64;
            }
            Ok(AggregateRow {
                method,
                dataset,
                noise_kind,
                rate: f64::from_bits(rate),
                repeats: runs.len(),
                mean,
                std,
                epoch_std,
            })
        })
        .collect()
}

/// Axis-aligned region of the plane sampled on a square lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    /// Bounding box of 2D points, widened by `pad` of its extent on each side.
    pub fn padded(points: &Tensor, pad: f64) -> Result<Self> {
        if points.shape().len() != 2 || points.row_len() != 2 || points.is_empty() {
            return Err(Error::invalid("decision lattices need 2D data"));
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points.rows() {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        for d in 0..2 {
            let extent = (max[d] - min[d]).max(1e-9);
            min[d] -= pad * extent;
            max[d] += pad * extent;
        }
        Ok(Bounds { min, max })
    }

    /// Lattice coordinates: row `r` (top to bottom, decreasing y), column `c`.
    pub fn point(&self, resolution: usize, r: usize, c: usize) -> [f64; 2] {
        let step = |d: usize, i: usize| {
            if resolution == 1 {
                0.5 * (self.min[d] + self.max[d])
            } else {
                self.min[d] + (self.max[d] - self.min[d]) * i as f64 / (resolution - 1) as f64
            }
        };
        [step(0, c), step(1, resolution - 1 - r)]
    }
}

pub const BOUNDARY_PADDING: f64 = 0.1;
pub const DEFAULT_GRID_RESOLUTION: usize = 200;

/// Predicted class at every lattice point, row-major from the top-left.
pub fn decision_lattice(model: &dyn Predict, bounds: &Bounds, resolution: usize) -> Result<Vec<usize>> {
    if resolution == 0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let mut coords = Vec::with_capacity(resolution * resolution * 2);
    for r in 0..resolution {
        for c in 0..resolution {
            coords.extend_from_slice(&bounds.point(resolution, r, c));
        }
    }
    let grid = Tensor::new(alloc::vec![resolution * resolution, 2], coords)?;
    Ok(model.predict(&grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn last_k_examples() {
        assert_eq!(last_k_mean(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), 3.5);
        assert_eq!(last_k_mean(&[5.0], 10).unwrap(), 5.0);
        assert!((last_k_mean(&[0.8, 0.9, 1.0], 3).unwrap() - 0.9).abs() < 1e-12);
        assert!(last_k_mean(&[1.0], 0).is_err());
    }

    fn run(method: &str, acc: f64) -> RunResult {
        RunResult::new(
            method,
            "moon",
            NoiseSpec::new(NoiseKind::InstanceDependent, 0.45, 0),
            0,
            alloc::vec![acc; 12],
        )
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let rows = aggregate(&[run("ce", 0.8), run("ce", 0.9), run("causalnl", 0.7)]).unwrap();
        assert_eq!(rows.len(), 2);
        let ce = rows.iter().find(|r| r.method == "ce").unwrap();
        assert!((ce.mean - 0.85).abs() < 1e-12);
        assert!((ce.std - 0.0707107).abs() < 1e-6);
        let single = rows.iter().find(|r| r.method == "causalnl").unwrap();
        assert_eq!(single.std, 0.0);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).unwrap().1, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    struct Sign;
    impl Predict for Sign {
        fn predict(&self, x: &Tensor) -> Vec<usize> {
            x.rows().map(|p| usize::from(p[0] + p[1] > 0.0)).collect()
        }
    }

    #[test]
    fn lattice_matches_sign_oracle() {
        let pts = Tensor::from_rows(&[[-1.0, -2.0], [1.5, 2.0]]).unwrap();
        let b = Bounds::padded(&pts, BOUNDARY_PADDING).unwrap();
        assert!((b.min[0] + 1.25).abs() < 1e-12 && (b.max[1] - 2.4).abs() < 1e-12);
        let res = 37;
        let labels = decision_lattice(&Sign, &b, res).unwrap();
        for r in 0..res {
            for c in 0..res {
                let p = b.point(res, r, c);
                assert_eq!(labels[r * res + c], usize::from(p[0] + p[1] > 0.0));
            }
        }
        assert!(Bounds::padded(&Tensor::zeros(alloc::vec![3, 3]), 0.1).is_err());
    }
}
