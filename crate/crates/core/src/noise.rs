//! Label-noise synthesis and transition matrices.
//!
//! `T[i][j] = P(noisy = j | clean = i)`. Rows are probability vectors, so the
//! noisy posterior is the transpose contraction `Σ_i T[i][j]·p_i`.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, NoisyDataset};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const ROW_SUM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransition", into = "RawTransition")]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTransition {
    num_classes: usize,
    entries: Vec<Vec<f64>>,
}

impl TryFrom<RawTransition> for TransitionMatrix {
    type Error = Error;

    fn try_from(raw: RawTransition) -> Result<Self> {
        if raw.entries.len() != raw.num_classes {
            return Err(Error::invalid("row count does not match num_classes"));
        }
        TransitionMatrix::from_rows(&raw.entries)
    }
}

impl From<TransitionMatrix> for RawTransition {
    fn from(t: TransitionMatrix) -> Self {
        RawTransition {
            num_classes: t.classes,
            entries: (0..t.classes).map(|i| t.row(i).to_vec()).collect(),
        }
    }
}

impl TransitionMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let classes = rows.len();
        if classes < 2 {
            return Err(Error::invalid("transition matrix needs at least two classes"));
        }
        let mut entries = Vec::with_capacity(classes * classes);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != classes {
                return Err(Error::invalid("transition matrix must be square"));
            }
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(alloc::format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if libm::fabs(sum - 1.0) > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(alloc::format!("row {i} sums to {sum}, not 1")));
            }
            entries.extend_from_slice(row);
        }
        Ok(TransitionMatrix { classes, entries })
    }

    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for i in 0..classes {
            entries[i * classes + i] = 1.0;
        }
        TransitionMatrix { classes, entries }
    }

    /// Diagonal `1 - rate`, remaining mass spread evenly over the other classes.
    pub fn symmetric(classes: usize, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        let off = rate / (classes - 1) as f64;
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|i| (0..classes).map(|j| if i == j { 1.0 - rate } else { off }).collect())
            .collect();
        TransitionMatrix::from_rows(&rows)
    }

    /// Diagonal `1 - rate`, the rest moved to the next class (cyclically).
    pub fn pairflip(classes: usize, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|i| {
                let mut row = vec![0.0; classes];
                row[i] = 1.0 - rate;
                row[(i + 1) % classes] += rate;
                row
            })
            .collect();
        TransitionMatrix::from_rows(&rows)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.classes..(i + 1) * self.classes]
    }

    /// Noisy posterior from a clean posterior without input validation.
    pub(crate) fn contract(&self, clean: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &p) in clean.iter().enumerate() {
            for (o, t) in out.iter_mut().zip(self.row(i)) {
                *o += t * p;
            }
        }
    }
}

/// `P(noisy | x) = Tᵀ·P(clean | x)`, i.e. component `j` is `Σ_i T[i][j]·p_i`.
pub fn apply_transition(t: &TransitionMatrix, clean_posterior: &[f64]) -> Result<Vec<f64>> {
    if clean_posterior.len() != t.classes {
        return Err(Error::invalid(alloc::format!(
            "posterior has {} classes, matrix has {}",
            clean_posterior.len(),
            t.classes
        )));
    }
    let sum: f64 = clean_posterior.iter().sum();
    if libm::fabs(sum - 1.0) > ROW_SUM_TOLERANCE || clean_posterior.iter().any(|p| *p < 0.0) {
        return Err(Error::invalid("clean posterior is not a probability vector"));
    }
    let mut out = vec![0.0; t.classes];
    t.contract(clean_posterior, &mut out);
    Ok(out)
}

/// Row `i` is the distribution of noisy labels among samples with clean
/// label `i`; rows without samples fall back to uniform.
pub fn empirical_transition(clean: &[usize], noisy: &[usize], classes: usize) -> Result<TransitionMatrix> {
    if clean.len() != noisy.len() {
        return Err(Error::invalid("label arrays differ in length"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mut counts = vec![0usize; classes * classes];
    for (&c, &n) in clean.iter().zip(noisy) {
        if c >= classes || n >= classes {
            return Err(Error::invalid(alloc::format!(
                "label pair ({c}, {n}) outside [0, {classes})"
            )));
        }
        counts[c * classes + n] += 1;
    }
    let mut entries = vec![0.0; classes * classes];
    for i in 0..classes {
        let row = &counts[i * classes..(i + 1) * classes];
        let total: usize = row.iter().sum();
        for j in 0..classes {
            entries[i * classes + j] = if total == 0 {
                1.0 / classes as f64
            } else {
                row[j] as f64 / total as f64
            };
        }
    }
    Ok(TransitionMatrix { classes, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    InstanceDependent,
    Symmetric,
    Pairflip,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::InstanceDependent => "instance-dependent",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Pairflip => "pairflip",
        }
    }
}

impl core::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance-dependent" | "instance" | "idn" => Ok(NoiseKind::InstanceDependent),
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "pairflip" | "pair" => Ok(NoiseKind::Pairflip),
            other => Err(Error::invalid(alloc::format!("unknown noise kind {other:?}"))),
        }
    }
}

pub const DEFAULT_FLIP_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    #[serde(default = "default_flip_std")]
    pub flip_std: f64,
}

fn default_flip_std() -> f64 {
    DEFAULT_FLIP_STD
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind,
            rate,
            seed,
            flip_std: DEFAULT_FLIP_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if !(self.flip_std >= 0.0) || !self.flip_std.is_finite() {
            return Err(Error::invalid("flip_std must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(alloc::format!("noise rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Normal(mean, std) conditioned on `[0, 1]`, by rejection.
fn truncated_normal(mean: f64, std: f64, r: &mut rng::Rng) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let normal = Normal::new(mean, std).expect("finite std");
    loop {
        let v: f64 = normal.sample(r);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

pub(crate) fn sample_categorical(probs: &[f64], r: &mut rng::Rng) -> usize {
    let u: f64 = Uniform::new(0.0, 1.0).sample(r);
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left u above the cumulative sum; take the last class with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Instance-dependent noise: per instance a flip mass `q_i` drawn from a
/// `[0, 1]`-truncated normal around the rate, spread over the other classes
/// by `softmax(x_i·W)` for one shared standard-normal projection `W` (m×C).
///
/// Returns the noisy dataset and each instance's noisy-label distribution.
pub fn synthesize_instance_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<(NoisyDataset, Vec<Vec<f64>>)> {
    if spec.kind != NoiseKind::InstanceDependent {
        return Err(Error::invalid(
            "synthesize_instance_noise needs an instance-dependent spec",
        ));
    }
    spec.validate()?;
    let c = ds.num_classes();
    let clean = ds.labels();
    if spec.rate == 0.0 {
        let dists = clean
            .iter()
            .map(|&y| {
                let mut d = vec![0.0; c];
                d[y] = 1.0;
                d
            })
            .collect();
        return Ok((NoisyDataset::new(ds.clone(), clean.to_vec(), true)?, dists));
    }

    let mut r = rng::derive(spec.seed, &[stream::NOISE]);
    let flip_mass: Vec<f64> = (0..ds.len())
        .map(|_| truncated_normal(spec.rate, spec.flip_std, &mut r))
        .collect();
    let m = ds.feature_dim();
    let projection: Vec<f64> = (0..m * c).map(|_| StandardNormal.sample(&mut r)).collect();

    let mut noisy = Vec::with_capacity(ds.len());
    let mut dists = Vec::with_capacity(ds.len());
    for (i, x) in ds.instances().rows().enumerate() {
        let y = clean[i];
        let mut scores = vec![0.0; c];
        for (k, xk) in x.iter().enumerate() {
            for (s, w) in scores.iter_mut().zip(&projection[k * c..(k + 1) * c]) {
                *s += xk * w;
            }
        }
        let max = scores
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != y)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut dist = vec![0.0; c];
        let mut z = 0.0;
        for j in (0..c).filter(|&j| j != y) {
            dist[j] = libm::exp(scores[j] - max);
            z += dist[j];
        }
        for j in (0..c).filter(|&j| j != y) {
            dist[j] *= flip_mass[i] / z;
        }
        dist[y] = 1.0 - flip_mass[i];
        noisy.push(sample_categorical(&dist, &mut r));
        dists.push(dist);
    }
    Ok((NoisyDataset::new(ds.clone(), noisy, true)?, dists))
}

/// Class-dependent noise drawn row-wise from a known transition matrix.
pub fn synthesize_from_transition(ds: &LabeledDataset, t: &TransitionMatrix, seed: u64) -> Result<NoisyDataset> {
    if t.num_classes() != ds.num_classes() {
        return Err(Error::invalid("transition matrix and dataset disagree on class count"));
    }
    let mut r = rng::derive(seed, &[stream::NOISE]);
    let noisy = ds
        .labels()
        .iter()
        .map(|&y| sample_categorical(t.row(y), &mut r))
        .collect();
    NoisyDataset::new(ds.clone(), noisy, true)
}

/// Flips each label with probability `rate` to a uniformly chosen other class.
pub fn synthesize_symmetric_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    if spec.kind != NoiseKind::Symmetric {
        return Err(Error::invalid("synthesize_symmetric_noise needs a symmetric spec"));
    }
    spec.validate()?;
    synthesize_from_transition(
        ds,
        &TransitionMatrix::symmetric(ds.num_classes(), spec.rate)?,
        spec.seed,
    )
}

/// Flips each label with probability `rate` to the next class.
pub fn synthesize_pairflip_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    if spec.kind != NoiseKind::Pairflip {
        return Err(Error::invalid("synthesize_pairflip_noise needs a pairflip spec"));
    }
    spec.validate()?;
    synthesize_from_transition(ds, &TransitionMatrix::pairflip(ds.num_classes(), spec.rate)?, spec.seed)
}

/// Dispatches on `spec.kind`.
pub fn synthesize(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    match spec.kind {
        NoiseKind::InstanceDependent => synthesize_instance_noise(ds, spec).map(|(n, _)| n),
        NoiseKind::Symmetric => synthesize_symmetric_noise(ds, spec),
        NoiseKind::Pairflip => synthesize_pairflip_noise(ds, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_moon;

    #[test]
    fn transition_examples() {
        let t = TransitionMatrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        assert_eq!(apply_transition(&t, &[1.0, 0.0]).unwrap(), vec![0.9, 0.1]);
        let mixed = apply_transition(&t, &[0.5, 0.5]).unwrap();
        assert!((mixed[0] - 0.55).abs() < 1e-15 && (mixed[1] - 0.45).abs() < 1e-15);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(
            apply_transition(&TransitionMatrix::identity(3), &p).unwrap(),
            p.to_vec()
        );
        assert!(apply_transition(&t, &[0.2, 0.3, 0.5]).is_err());
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        assert!(TransitionMatrix::from_rows(&[[0.9, 0.2], [0.2, 0.8]]).is_err());
        assert!(TransitionMatrix::from_rows(&[[1.1, -0.1], [0.2, 0.8]]).is_err());
        assert!(TransitionMatrix::from_rows(&[[1.0]]).is_err());
    }

    #[test]
    fn empirical_transition_examples() {
        let t = empirical_transition(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(t.row(0), &[0.5, 0.5]);
        assert_eq!(t.row(1), &[0.0, 1.0]);
        let labels = [0, 1, 2, 1];
        assert_eq!(
            empirical_transition(&labels, &labels, 3).unwrap(),
            TransitionMatrix::identity(3)
        );
        let t = empirical_transition(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(t.row(2), &[1.0 / 3.0; 3]);
        assert!(empirical_transition(&[0, 3], &[0, 1], 3).is_err());
        assert!(empirical_transition(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn zero_rate_keeps_labels() {
        let ds = generate_moon(100, 0.1, 1).unwrap();
        let (noisy, dists) =
            synthesize_instance_noise(&ds, &NoiseSpec::new(NoiseKind::InstanceDependent, 0.0, 1)).unwrap();
        assert_eq!(noisy.noisy_labels(), ds.labels());
        assert!(dists.iter().zip(ds.labels()).all(|(d, &y)| d[y] == 1.0));
        let sym = synthesize_symmetric_noise(&ds, &NoiseSpec::new(NoiseKind::Symmetric, 0.0, 1)).unwrap();
        assert_eq!(sym.noisy_labels(), ds.labels());
    }

    #[test]
    fn instance_distributions_are_valid() {
        let ds = generate_moon(500, 0.1, 2).unwrap();
        let spec = NoiseSpec::new(NoiseKind::InstanceDependent, 0.45, 3);
        let (noisy, dists) = synthesize_instance_noise(&ds, &spec).unwrap();
        for (d, &y) in dists.iter().zip(ds.labels()) {
            assert!(d.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d[y] <= 1.0);
        }
        let (again, _) = synthesize_instance_noise(&ds, &spec).unwrap();
        assert_eq!(noisy.noisy_labels(), again.noisy_labels());
    }

    #[test]
    fn rate_validation() {
        let ds = generate_moon(10, 0.1, 2).unwrap();
        for rate in [1.0, -0.1, f64::NAN] {
            assert!(synthesize(&ds, &NoiseSpec::new(NoiseKind::InstanceDependent, rate, 0)).is_err());
            assert!(synthesize(&ds, &NoiseSpec::new(NoiseKind::Symmetric, rate, 0)).is_err());
        }
        assert!(synthesize_symmetric_noise(&ds, &NoiseSpec::new(NoiseKind::Pairflip, 0.1, 0)).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let t = TransitionMatrix::symmetric(3, 0.3).unwrap();
        let raw: RawTransition = t.clone().into();
        assert_eq!(TransitionMatrix::try_from(raw).unwrap(), t);
    }
}
