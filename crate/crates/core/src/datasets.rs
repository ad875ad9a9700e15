//! Labeled and noisy datasets, the two-moons generator, IDX decoding,
//! image augmentation and deterministic mini-batching.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// `channels × height × width` layout of a flattened image instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    instances: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    image_shape: Option<ImageShape>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        instances: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        image_shape: Option<ImageShape>,
    ) -> Result<Self> {
        let instances = instances.flattened();
        if instances.batch() == 0 {
            return Err(Error::invalid("dataset must not be empty"));
        }
        if instances.row_len() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if labels.len() != instances.batch() {
            return Err(Error::Consistency(alloc::format!(
                "{} instances but {} labels",
                instances.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(alloc::format!("label {bad} outside [0, {num_classes})")));
        }
        if !instances.is_finite() {
            return Err(Error::invalid("feature values must be finite"));
        }
        if let Some(shape) = image_shape {
            if shape.len() != instances.row_len() {
                return Err(Error::invalid("image shape does not match feature dimension"));
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            instances,
            labels,
            num_classes,
            image_shape,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `[N, m]` feature matrix.
    pub fn instances(&self) -> &Tensor {
        &self.instances
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.row_len()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(alloc::format!("index {bad} out of range")));
        }
        LabeledDataset::new(
            self.name.clone(),
            self.instances.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.image_shape,
        )
    }

    /// A uniformly random subset of `n` instances, kept in original order.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(alloc::format!(
                "subset size {n} not in [1, {}]",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut order, &mut rng::derive(seed, &[stream::SUBSET]));
        let mut picked = order[..n].to_vec();
        picked.sort_unstable();
        self.subset(&picked)
    }
}

/// A dataset with observed noisy labels. Clean labels, when present, are for
/// evaluation only; reads go through [`NoisyDataset::clean_labels`], which
/// fails when they are marked unavailable and counts every access.
#[derive(Debug)]
pub struct NoisyDataset {
    base: LabeledDataset,
    noisy_labels: Vec<usize>,
    clean_labels_available: bool,
    clean_reads: AtomicUsize,
}

impl Clone for NoisyDataset {
    fn clone(&self) -> Self {
        NoisyDataset {
            base: self.base.clone(),
            noisy_labels: self.noisy_labels.clone(),
            clean_labels_available: self.clean_labels_available,
            clean_reads: AtomicUsize::new(self.clean_reads.load(Ordering::Relaxed)),
        }
    }
}

impl NoisyDataset {
    pub fn new(base: LabeledDataset, noisy_labels: Vec<usize>, clean_labels_available: bool) -> Result<Self> {
        if noisy_labels.len() != base.len() {
            return Err(Error::Consistency(alloc::format!(
                "{} instances but {} noisy labels",
                base.len(),
                noisy_labels.len()
            )));
        }
        if let Some(&bad) = noisy_labels.iter().find(|&&l| l >= base.num_classes) {
            return Err(Error::invalid(alloc::format!("noisy label {bad} out of range")));
        }
        Ok(NoisyDataset {
            base,
            noisy_labels,
            clean_labels_available,
            clean_reads: AtomicUsize::new(0),
        })
    }

    /// Hides the clean labels from every later read.
    pub fn without_clean_labels(mut self) -> Self {
        self.clean_labels_available = false;
        self
    }

    pub fn name(&self) -> &str {
        self.base.name()
    }

    pub fn instances(&self) -> &Tensor {
        self.base.instances()
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn clean_labels_available(&self) -> bool {
        self.clean_labels_available
    }

    pub fn clean_labels(&self) -> Result<&[usize]> {
        if !self.clean_labels_available {
            return Err(Error::CleanLabelsUnavailable);
        }
        self.clean_reads.fetch_add(1, Ordering::Relaxed);
        Ok(self.base.labels())
    }

    /// How many times clean labels have been handed out.
    pub fn clean_label_reads(&self) -> usize {
        self.clean_reads.load(Ordering::Relaxed)
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.base.feature_dim()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.base.image_shape()
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Fraction of instances whose noisy label differs from the clean one.
    pub fn realized_noise_rate(&self) -> Result<f64> {
        let clean = self.clean_labels()?;
        let flipped = clean.iter().zip(&self.noisy_labels).filter(|(a, b)| a != b).count();
        Ok(flipped as f64 / self.len() as f64)
    }
}

/// Point on moon `class` at angle `t ∈ [0, π]`: the upper half circle for
/// class 0, the shifted lower half circle for class 1.
pub fn moon_point(class: usize, t: f64) -> [f64; 2] {
    let (c, s) = (libm::cos(t), libm::sin(t));
    if class == 0 {
        [c, s]
    } else {
        [1.0 - c, 0.5 - s]
    }
}

/// Two interleaved half circles with isotropic Gaussian jitter; `n / 2`
/// points per class, class 0 first.
pub fn generate_moon(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid(alloc::format!(
            "moon size must be even and >= 2, got {n}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::invalid("noise_std must be a finite non-negative number"));
    }
    let mut r = rng::derive(seed, &[stream::MOON]);
    let angle = Uniform::new_inclusive(0.0, PI);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for _ in 0..n / 2 {
            let [x, y] = moon_point(class, angle.sample(&mut r));
            let jx: f64 = StandardNormal.sample(&mut r);
            let jy: f64 = StandardNormal.sample(&mut r);
            data.push(x + noise_std * jx);
            data.push(y + noise_std * jy);
            labels.push(class);
        }
    }
    LabeledDataset::new("moon", Tensor::new(alloc::vec![n, 2], data)?, labels, 2, None)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("truncated IDX header".into()))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let data = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(alloc::format!("truncated IDX payload: expected {n} bytes")))?;
        self.pos += n;
        Ok(data)
    }
}

/// Decodes an IDX image file (`0x00000803`, dims `n, rows, cols`) into
/// `[0, 1]` pixels and its shape.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(Tensor, ImageShape)> {
    let mut r = IdxReader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(alloc::format!(
            "image file magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.payload(n * rows * cols)?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let shape = ImageShape {
        channels: 1,
        height: rows,
        width: cols,
    };
    Ok((Tensor::new(alloc::vec![n, rows * cols], data)?, shape))
}

/// Decodes an IDX label file (`0x00000801`, dim `n`).
pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(alloc::format!(
            "label file magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let n = r.u32()? as usize;
    Ok(r.payload(n)?.iter().map(|&b| b as usize).collect())
}

/// Combines decoded IDX images and labels; the class count is inferred as
/// `max(label) + 1` (at least 2).
pub fn dataset_from_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (instances, shape) = decode_idx_images(images)?;
    let labels = decode_idx_labels(labels)?;
    if instances.batch() != labels.len() {
        return Err(Error::Consistency(alloc::format!(
            "{} images but {} labels",
            instances.batch(),
            labels.len()
        )));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(name, instances, labels, classes.max(2), Some(shape))
}

/// Encodes pixels (rounded from `[0, 1]` to bytes) as an IDX image file.
pub fn encode_idx_images(instances: &Tensor, shape: ImageShape) -> Result<Vec<u8>> {
    if shape.channels != 1 || shape.len() != instances.row_len() {
        return Err(Error::invalid(
            "IDX images must be single-channel and match the feature width",
        ));
    }
    let mut out = Vec::with_capacity(16 + instances.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(instances.batch() as u32).to_be_bytes());
    out.extend_from_slice(&(shape.height as u32).to_be_bytes());
    out.extend_from_slice(&(shape.width as u32).to_be_bytes());
    out.extend(
        instances
            .data()
            .iter()
            .map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid("IDX labels must fit in a byte"))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Zero-pad by 4 pixels, then crop back to the original size at a random offset.
    RandomCrop,
    /// Mirror left-right with probability 0.5.
    HorizontalFlip,
}

pub const CROP_PADDING: usize = 4;

pub fn flip_horizontal(image: &[f64], shape: ImageShape) -> Vec<f64> {
    let mut out = image.to_vec();
    for row in out.chunks_mut(shape.width) {
        row.reverse();
    }
    out
}

/// Crops the zero-padded image at offset `(dy, dx)` in `[0, 2·CROP_PADDING]`.
pub fn crop_padded(image: &[f64], shape: ImageShape, dy: usize, dx: usize) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = alloc::vec![0.0; image.len()];
    for c in 0..shape.channels {
        for i in 0..h {
            let si = i as isize + dy as isize - CROP_PADDING as isize;
            if si < 0 || si as usize >= h {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + dx as isize - CROP_PADDING as isize;
                if sj < 0 || sj as usize >= w {
                    continue;
                }
                out[(c * h + i) * w + j] = image[(c * h + si as usize) * w + sj as usize];
            }
        }
    }
    out
}

/// Applies the augmentation `modes` in order to every image of `batch`.
/// Deterministic given `seed`; 2-D synthetic data (no image shape) is rejected.
pub fn augment(batch: &Tensor, image_shape: Option<ImageShape>, modes: &[Augmentation], seed: u64) -> Result<Tensor> {
    let shape = image_shape.ok_or_else(|| Error::invalid("augmentation requires image data"))?;
    if shape.len() != batch.row_len() {
        return Err(Error::invalid("image shape does not match the batch"));
    }
    let mut r = rng::derive(seed, &[stream::AUGMENT]);
    let offset = Uniform::new_inclusive(0, 2 * CROP_PADDING);
    let coin = Uniform::new(0.0f64, 1.0);
    let mut out = batch.clone();
    for i in 0..batch.batch() {
        let mut img = batch.row(i).to_vec();
        for mode in modes {
            img = match mode {
                Augmentation::RandomCrop => {
                    let (dy, dx) = (offset.sample(&mut r), offset.sample(&mut r));
                    crop_padded(&img, shape, dy, dx)
                }
                Augmentation::HorizontalFlip => {
                    if coin.sample(&mut r) < 0.5 {
                        flip_horizontal(&img, shape)
                    } else {
                        img
                    }
                }
            };
        }
        out.row_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}

pub(crate) fn shuffle<T>(items: &mut [T], r: &mut rng::Rng) {
    for i in (1..items.len()).rev() {
        let j = Uniform::new_inclusive(0, i).sample(r);
        items.swap(i, j);
    }
}

/// Deterministic mini-batch schedule over `len` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub len: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if batch_size > len {
            return Err(Error::invalid(alloc::format!(
                "batch_size {batch_size} exceeds dataset size {len}"
            )));
        }
        Ok(BatchIterator {
            len,
            batch_size,
            shuffle_seed,
            drop_last: false,
        })
    }

    /// Index batches for `epoch`: a permutation fixed by `(shuffle_seed, epoch)`
    /// cut into consecutive chunks.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        shuffle(
            &mut order,
            &mut rng::derive(self.shuffle_seed, &[stream::SHUFFLE, epoch as u64]),
        );
        order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    Ok(BatchIterator::new(len, batch_size, seed)?.epoch(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moon_parametrization_endpoints() {
        assert_eq!(moon_point(0, 0.0), [1.0, 0.0]);
        assert_eq!(moon_point(1, 0.0), [0.0, 0.5]);
        let p = moon_point(0, PI / 2.0);
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moon_rejects_bad_sizes() {
        assert!(generate_moon(1, 0.1, 0).is_err());
        assert!(generate_moon(5, 0.1, 0).is_err());
        assert!(generate_moon(4, -1.0, 0).is_err());
    }

    #[test]
    fn noiseless_moon_lies_on_curves() {
        let ds = generate_moon(200, 0.0, 3).unwrap();
        for (x, &c) in ds.instances().rows().zip(ds.labels()) {
            let (cx, cy) = if c == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = libm::hypot(x[0] - cx, x[1] - cy);
            assert!((r - 1.0).abs() < 1e-12);
            assert!(if c == 0 { x[1] >= -1e-12 } else { x[1] <= 0.5 + 1e-12 });
        }
    }

    #[test]
    fn idx_crafted_bytes() {
        let images = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0xFF];
        let labels = [0, 0, 8, 1, 0, 0, 0, 1, 3];
        let ds = dataset_from_idx("x", &images, &labels).unwrap();
        assert_eq!(ds.instances().data(), &[1.0]);
        assert_eq!(ds.labels(), &[3]);
        assert_eq!(ds.num_classes(), 4);
    }

    #[test]
    fn idx_errors() {
        let wrong_magic = [0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0xFF];
        assert!(matches!(decode_idx_images(&wrong_magic), Err(Error::Format(_))));
        let two_images = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 1, 2];
        let one_label = [0, 0, 8, 1, 0, 0, 0, 1, 3];
        assert!(matches!(
            dataset_from_idx("x", &two_images, &one_label),
            Err(Error::Consistency(_))
        ));
        let truncated = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 1];
        assert!(matches!(decode_idx_images(&truncated), Err(Error::Format(_))));
        assert!(matches!(decode_idx_labels(&[0, 0, 8]), Err(Error::Format(_))));
    }

    #[test]
    fn clean_label_guard() {
        let ds = generate_moon(4, 0.0, 0).unwrap();
        let noisy = NoisyDataset::new(ds, alloc::vec![0, 0, 1, 1], true).unwrap();
        assert!(noisy.clean_labels().is_ok());
        assert_eq!(noisy.clean_label_reads(), 1);
        let hidden = noisy.without_clean_labels();
        assert_eq!(hidden.clean_labels(), Err(Error::CleanLabelsUnavailable));
        assert_eq!(hidden.clean_label_reads(), 1);
    }

    #[test]
    fn augmentation_contract() {
        let shape = ImageShape {
            channels: 1,
            height: 4,
            width: 4,
        };
        let symmetric: Vec<f64> = (0..16).map(|i| [1.0, 2.0, 2.0, 1.0][i % 4] * (i / 4) as f64).collect();
        assert_eq!(flip_horizontal(&symmetric, shape), symmetric);
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(flip_horizontal(&flip_horizontal(&img, shape), shape), img);
        assert_eq!(crop_padded(&img, shape, CROP_PADDING, CROP_PADDING), img);

        let batch = Tensor::new(alloc::vec![1, 16], img.clone()).unwrap();
        let out = augment(&batch, Some(shape), &[Augmentation::RandomCrop], 11).unwrap();
        assert_eq!(out.shape(), batch.shape());
        assert!(out.data().iter().all(|v| *v == 0.0 || img.contains(v)));
        assert_eq!(
            out,
            augment(&batch, Some(shape), &[Augmentation::RandomCrop], 11).unwrap()
        );
        assert!(augment(&batch, None, &[Augmentation::HorizontalFlip], 0).is_err());
    }

    #[test]
    fn batches_cover_and_repeat() {
        let b = batches(4, 2, 9, 0).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, [0, 1, 2, 3]);
        assert_eq!(b, batches(4, 2, 9, 0).unwrap());
        assert_ne!(batches(1000, 10, 1, 0).unwrap(), batches(1000, 10, 1, 1).unwrap());
        assert!(batches(3, 4, 0, 0).is_err());
        assert!(batches(3, 0, 0, 0).is_err());
        let mut it = BatchIterator::new(5, 2, 0).unwrap();
        assert_eq!(it.epoch(0).concat().len(), 5);
        it.drop_last = true;
        assert_eq!(it.epoch(0).concat().len(), 4);
    }
}
