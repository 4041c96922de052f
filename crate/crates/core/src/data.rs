//! MNIST IDX and CIFAR-10 binary readers, standardization, and seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// (N, C, H, W), raw pixels in [0, 1] until standardized.
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.images.shape().n {
            return Err(Error::Format(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.images.shape().n
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Format(format!(
                "label {bad} outside [0, {})",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channel_stats(&self) -> Standardization {
        let s = self.images.shape();
        let count = (s.n * s.plane()) as f64;
        let mut mean = vec![0.0; s.c];
        let mut std = vec![0.0; s.c];
        for c in 0..s.c {
            let sum: f64 = (0..s.n)
                .flat_map(|n| self.images.plane(n, c).iter())
                .map(|&v| v as f64)
                .sum();
            let m = sum / count;
            let sq: f64 = (0..s.n)
                .flat_map(|n| self.images.plane(n, c).iter())
                .map(|&v| (v as f64 - m).powi(2))
                .sum();
            mean[c] = m;
            std[c] = (sq / count).sqrt().max(1e-12);
        }
        Standardization { mean, std }
    }

    fn apply(&mut self, stats: &Standardization, f: impl Fn(f64, f64, f64) -> f64) -> Result<()> {
        let s = self.images.shape();
        if stats.mean.len() != s.c || stats.std.len() != s.c {
            return Err(Error::shape("standardization channels", s.c, stats.mean.len()));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                for v in self.images.plane_mut(n, c) {
                    *v = f(*v as f64, stats.mean[c], stats.std[c]) as f32;
                }
            }
        }
        Ok(())
    }

    pub fn standardize(&mut self, stats: &Standardization) -> Result<()> {
        self.apply(stats, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&mut self, stats: &Standardization) -> Result<()> {
        self.apply(stats, |v, m, s| v * s + m)
    }

    /// First `n` samples (or all, when fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        let s = self.images.shape();
        let images = Tensor4::new(
            Shape4::new(n, s.c, s.h, s.w),
            self.images.data()[..n * s.sample()].to_vec(),
        )
        .expect("prefix of a valid tensor");
        Self {
            images,
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file and its label file.
pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let lmagic = be_u32(labels, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {lmagic:#010x}")));
    }
    let ln = be_u32(labels, 4, "labels")? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty IDX file".into()));
    }
    let pixels = images
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Format("images: truncated pixel data".into()))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("labels: truncated label data".into()))?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor4::new([n, 1, rows, cols], data)?;
    Dataset::new(images, label_bytes.iter().map(|&l| l as usize).collect(), 10)
}

pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_mnist(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Parses concatenated CIFAR-10 records (label byte + R, G, B planes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(Tensor4::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10)
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::Format("no CIFAR-10 batch files given".into()));
    }
    let mut bytes = Vec::new();
    for p in batch_paths {
        let chunk = fs::read(p)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

/// Class-conditional noisy templates in [0, 1]; a stand-in when no image
/// files are available.
pub fn synthetic(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Dataset> {
    let [c, h, w] = shape;
    if n == 0 || classes == 0 {
        return Err(Error::InvalidParam("synthetic dataset needs n, classes >= 1".into()));
    }
    // Templates depend only on the class set, so train and validation splits
    // drawn with different seeds share them.
    let mut trng = ChaCha8Rng::seed_from_u64(0x5eed_7e3a ^ classes as u64);
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..c * h * w).map(|_| trng.random::<f32>()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        labels.push(label);
        data.extend(
            templates[label]
                .iter()
                .map(|&t| (0.6 * t + 0.4 * rng.random::<f32>()).clamp(0.0, 1.0)),
        );
    }
    Dataset::new(Tensor4::new([n, c, h, w], data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    None,
    /// Horizontal flip with p = 0.5, then a random crop from a 4-pixel zero pad.
    FlipCrop,
}

const CROP_PAD: usize = 4;

fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ stream.wrapping_mul(0x94d0_49bb_1331_11eb)
}

/// Seeded sample order for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch, 0)));
    idx
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Deterministic batch stream over one epoch.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Augment,
    rng: ChaCha8Rng,
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize, augment: Augment) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    Batches {
        ds,
        order: epoch_permutation(ds.len(), seed, epoch),
        batch_size,
        pos: 0,
        augment,
        rng: ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch, 1)),
    }
}

/// Batches in dataset order, without augmentation (evaluation).
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Batches<'_> {
    Batches {
        ds,
        order: (0..ds.len()).collect(),
        batch_size,
        pos: 0,
        augment: Augment::None,
        rng: ChaCha8Rng::seed_from_u64(0),
    }
}

fn flip_crop(src: &[f32], dst: &mut [f32], shape: Shape4, rng: &mut ChaCha8Rng) {
    let (h, w) = (shape.h, shape.w);
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    for c in 0..shape.c {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let out = &mut dst[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let si = i as isize + dy;
                let sj = j as isize + dx;
                out[i * w + j] = if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                    let sj = if flip { w - 1 - sj as usize } else { sj as usize };
                    plane[si as usize * w + sj]
                } else {
                    0.0
                };
            }
        }
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let s = self.ds.images.shape();
        let per = s.sample();
        let mut data = vec![0.0f32; indices.len() * per];
        for (k, &i) in indices.iter().enumerate() {
            let src = self.ds.images.sample(i);
            let dst = &mut data[k * per..(k + 1) * per];
            match self.augment {
                Augment::None => dst.copy_from_slice(src),
                Augment::FlipCrop => flip_crop(src, dst, s, &mut self.rng),
            }
        }
        let images = Tensor4::new([indices.len(), s.c, s.h, s.w], data).expect("batch shape");
        let labels = indices.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}
