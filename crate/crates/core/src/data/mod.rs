//! Datasets, seeded batch iteration and synthetic low-rank streams.

mod cifar;
mod idx;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use cifar::{load_cifar, load_cifar10, load_cifar10_dir, CifarFormat, CIFAR10_RECORD, CIFAR100_RECORD};
pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{synthetic_stream, StreamDesign, SyntheticStream, SyntheticStreamSpec};

/// Channel-major image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

/// Labelled images, one sample per row of `images`, pixels in `[0, 1]`
/// unless standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub shape: ImageShape,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, class_count: usize, shape: ImageShape) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.cols() != shape.len() {
            return Err(Error::Data(format!(
                "sample width {} does not match image shape {shape:?}",
                images.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `count` samples (or all of them, if fewer). Subsets are
    /// always leading slices so runs stay reproducible.
    pub fn take(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        Dataset {
            images: self.images.row_block(0, count),
            labels: self.labels[..count].to_vec(),
            class_count: self.class_count,
            shape: self.shape,
        }
    }

    pub fn select(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (self.images.select_rows(indices), labels)
    }

    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let Some(first) = iter.next() else {
            return Err(Error::Data("no dataset parts to concatenate".into()));
        };
        let mut data = first.images.into_vec();
        let mut labels = first.labels;
        for part in iter {
            if part.shape != first.shape || part.class_count != first.class_count {
                return Err(Error::Data("dataset parts disagree on shape or class count".into()));
            }
            data.extend_from_slice(part.images.as_slice());
            labels.extend(part.labels);
        }
        let images = Matrix::from_vec(labels.len(), first.shape.len(), data)?;
        Dataset::new(images, labels, first.class_count, first.shape)
    }

    pub fn mean_pixel(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.as_slice().iter().sum::<f64>() / self.images.len() as f64
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.shape.height * self.shape.width;
        let mut mean = vec![0.0; self.shape.channels];
        let mut std = vec![0.0; self.shape.channels];
        let count = (self.len() * plane) as f64;
        for c in 0..self.shape.channels {
            let values = || (0..self.len()).flat_map(move |i| self.images.row(i)[c * plane..(c + 1) * plane].iter());
            let mu = values().sum::<f64>() / count.max(1.0);
            let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count.max(1.0);
            mean[c] = mu;
            std[c] = var.sqrt();
        }
        ChannelStats { mean, std }
    }

    /// Applies `(v - mean_c) / std_c` per channel.
    pub fn standardize(&mut self, stats: &ChannelStats) {
        let plane = self.shape.height * self.shape.width;
        for i in 0..self.len() {
            let row = self.images.row_mut(i);
            for c in 0..self.shape.channels {
                let scale = if stats.std[c] > 0.0 { 1.0 / stats.std[c] } else { 1.0 };
                for v in &mut row[c * plane..(c + 1) * plane] {
                    *v = (*v - stats.mean[c]) * scale;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Seeded per-epoch shuffle split into `⌊N/B⌋` full batches; the remainder
/// is dropped.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    batch_indices(dataset.len(), batch_size, seed, epoch)
}

pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size > len {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// A toy classification set: `classes` Gaussian clusters in `dims`
/// dimensions with centres fixed by `centre_seed` and unit-variance spread
/// drawn from `sample_seed`. Labels cycle through the classes, so every
/// leading slice is balanced. Values are not confined to `[0, 1]`.
pub fn gaussian_blobs(samples: usize, dims: usize, classes: usize, centre_seed: u64, sample_seed: u64) -> Result<Dataset> {
    if dims == 0 || classes < 2 {
        return Err(Error::Config("blobs need at least 1 dimension and 2 classes".into()));
    }
    let centres = Matrix::gaussian(classes, dims, &mut ChaCha8Rng::seed_from_u64(centre_seed));
    let noise = Matrix::gaussian(samples, dims, &mut ChaCha8Rng::seed_from_u64(sample_seed));
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let images = Matrix::from_fn(samples, dims, |i, j| 2.0 * centres[(labels[i], j)] + noise[(i, j)]);
    let shape = ImageShape {
        channels: 1,
        height: 1,
        width: dims,
    };
    Dataset::new(images, labels, classes, shape)
}

/// Derives an independent stream seed from a base seed and a tag.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
