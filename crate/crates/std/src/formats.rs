//! Dataset, noise and transition-matrix files.
//!
//! * MOON CSV: header `x0,x1,clean,noisy`; `noisy` may be empty.
//! * Noise CSV: header `index,clean,noisy`, one row per training instance.
//! * Transition JSON: `{"num_classes": C, "entries": [[...], ...]}`.
//! * IDX: the big-endian MNIST layout, `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.

use std::fs;
use std::path::{Path, PathBuf};

use causalnl_core::datasets::{dataset_from_idx, encode_idx_images, encode_idx_labels, LabeledDataset, NoisyDataset};
use causalnl_core::noise::TransitionMatrix;
use causalnl_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    (
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

pub fn read_idx_dataset(dir: &Path, split: Split, name: &str) -> Result<LabeledDataset> {
    let (images, labels) = idx_paths(dir, split);
    let ds = dataset_from_idx(name, &read_bytes(&images)?, &read_bytes(&labels)?)?;
    Ok(ds)
}

pub fn write_idx_dataset(dir: &Path, split: Split, ds: &LabeledDataset) -> Result<()> {
    let shape = ds
        .image_shape()
        .ok_or_else(|| Error::format(dir, "IDX output needs image data"))?;
    let (images, labels) = idx_paths(dir, split);
    write_bytes(&images, &encode_idx_images(ds.instances(), shape)?)?;
    write_bytes(&labels, &encode_idx_labels(ds.labels())?)
}

#[derive(Debug, Serialize, Deserialize)]
struct MoonRow {
    x0: f64,
    x1: f64,
    clean: usize,
    noisy: Option<usize>,
}

pub fn write_moon_csv(path: &Path, ds: &LabeledDataset, noisy: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, (x, &clean)) in ds.instances().rows().zip(ds.labels()).enumerate() {
        w.serialize(MoonRow {
            x0: x[0],
            x1: x[1],
            clean,
            noisy: noisy.map(|n| n[i]),
        })?;
    }
    write_bytes(path, &w.into_inner().map_err(|e| Error::io(path)(e.into_error()))?)
}

/// Reads a MOON CSV; the second value holds the noisy labels when present on every row.
pub fn read_moon_csv(path: &Path) -> Result<(LabeledDataset, Option<Vec<usize>>)> {
    let bytes = read_bytes(path)?;
    let mut points = Vec::new();
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize::<MoonRow>() {
        let row = row?;
        points.push([row.x0, row.x1]);
        clean.push(row.clean);
        noisy.push(row.noisy);
    }
    if points.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let classes = clean.iter().copied().max().unwrap_or(0).max(1) + 1;
    let ds = LabeledDataset::new("moon", Tensor::from_rows(&points)?, clean, classes, None)?;
    let noisy = noisy.iter().copied().collect::<Option<Vec<usize>>>();
    Ok((ds, noisy))
}

#[derive(Debug, Serialize, Deserialize)]
struct NoiseRow {
    index: usize,
    clean: usize,
    noisy: usize,
}

/// Freezes a noise realization. Needs clean labels, which the file records.
pub fn write_noise_csv(path: &Path, data: &NoisyDataset) -> Result<()> {
    let clean = data.clean_labels()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (index, (&c, &n)) in clean.iter().zip(data.noisy_labels()).enumerate() {
        w.serialize(NoiseRow {
            index,
            clean: c,
            noisy: n,
        })?;
    }
    write_bytes(path, &w.into_inner().map_err(|e| Error::io(path)(e.into_error()))?)
}

/// Re-attaches a frozen noise realization to its clean dataset.
pub fn read_noise_csv(path: &Path, base: LabeledDataset) -> Result<NoisyDataset> {
    let bytes = read_bytes(path)?;
    let mut noisy = vec![usize::MAX; base.len()];
    let mut seen = 0;
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize::<NoiseRow>() {
        let row = row?;
        if row.index >= base.len() || noisy[row.index] != usize::MAX {
            return Err(Error::format(path, format!("bad or repeated index {}", row.index)));
        }
        if base.labels()[row.index] != row.clean {
            return Err(Error::format(
                path,
                format!("clean label mismatch at index {}", row.index),
            ));
        }
        noisy[row.index] = row.noisy;
        seen += 1;
    }
    if seen != base.len() {
        return Err(Error::format(path, format!("{seen} rows for {} instances", base.len())));
    }
    Ok(NoisyDataset::new(base, noisy, true)?)
}

pub fn write_transition_json(path: &Path, t: &TransitionMatrix) -> Result<()> {
    write_bytes(path, &serde_json::to_vec_pretty(t)?)
}

pub fn read_transition_json(path: &Path) -> Result<TransitionMatrix> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalnl_core::datasets::{generate_moon, ImageShape};
    use causalnl_core::noise::{synthesize, NoiseKind, NoiseSpec};

    #[test]
    fn moon_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moon.csv");
        let ds = generate_moon(64, 0.1, 5).unwrap();
        write_moon_csv(&path, &ds, None).unwrap();
        let (back, noisy) = read_moon_csv(&path).unwrap();
        assert_eq!(back.instances(), ds.instances());
        assert_eq!(back.labels(), ds.labels());
        assert!(noisy.is_none());

        let flipped: Vec<usize> = ds.labels().iter().map(|l| 1 - l).collect();
        write_moon_csv(&path, &ds, Some(&flipped)).unwrap();
        assert_eq!(read_moon_csv(&path).unwrap().1, Some(flipped));
    }

    #[test]
    fn noise_csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.csv");
        let ds = generate_moon(100, 0.1, 6).unwrap();
        let noisy = synthesize(&ds, &NoiseSpec::new(NoiseKind::Symmetric, 0.3, 1)).unwrap();
        write_noise_csv(&path, &noisy).unwrap();
        let back = read_noise_csv(&path, ds.clone()).unwrap();
        assert_eq!(back.noisy_labels(), noisy.noisy_labels());

        let other = generate_moon(100, 0.1, 7).unwrap();
        if other.labels() != ds.labels() {
            assert!(matches!(read_noise_csv(&path, other), Err(Error::Format { .. })));
        }
        let short = ds.subset(&(0..50).collect::<Vec<_>>()).unwrap();
        assert!(matches!(read_noise_csv(&path, short), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ImageShape {
            channels: 1,
            height: 3,
            width: 2,
        };
        let pixels: Vec<[f64; 6]> = (0..4)
            .map(|i| core::array::from_fn(|j| ((i * 6 + j) * 10) as f64 / 255.0))
            .collect();
        let ds = LabeledDataset::new(
            "img",
            Tensor::from_rows(&pixels).unwrap(),
            vec![0, 3, 9, 1],
            10,
            Some(shape),
        )
        .unwrap();
        write_idx_dataset(dir.path(), Split::Test, &ds).unwrap();
        assert!(dir.path().join("t10k-labels-idx1-ubyte").exists());
        let back = read_idx_dataset(dir.path(), Split::Test, "img").unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.image_shape(), Some(shape));
        for (a, b) in back.instances().data().iter().zip(ds.instances().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            read_idx_dataset(dir.path(), Split::Train, "img"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn transition_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = TransitionMatrix::pairflip(4, 0.2).unwrap();
        write_transition_json(&path, &t).unwrap();
        assert_eq!(read_transition_json(&path).unwrap(), t);
    }
}
