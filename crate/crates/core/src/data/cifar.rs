use std::fs;
use std::path::Path;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR100_RECORD: usize = 2 + 3072;

const SHAPE: ImageShape = ImageShape {
    channels: 3,
    height: 32,
    width: 32,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    /// `label | 3072 pixels`
    Cifar10,
    /// `coarse | fine | 3072 pixels`; only the fine label is kept.
    Cifar100,
}

impl CifarFormat {
    fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => CIFAR10_RECORD,
            CifarFormat::Cifar100 => CIFAR100_RECORD,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }
}

pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    load_cifar(batch_files, CifarFormat::Cifar10)
}

/// Concatenates binary batch files in the given order. Pixels are stored
/// channel-major (R plane, G plane, B plane) and scaled to `[0, 1]`.
pub fn load_cifar<P: AsRef<Path>>(batch_files: &[P], format: CifarFormat) -> Result<Dataset> {
    let record = format.record_len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    // Validate everything before building so no partial dataset escapes.
    let mut blobs = Vec::with_capacity(batch_files.len());
    for path in batch_files {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.len() % record != 0 {
            return Err(Error::format(
                path,
                format!("{} bytes is not a multiple of the {record}-byte record", bytes.len()),
            ));
        }
        blobs.push(bytes);
    }
    for bytes in &blobs {
        for rec in bytes.chunks_exact(record) {
            let label = usize::from(rec[record - 3073]);
            labels.push(label);
            data.extend(rec[record - 3072..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let images = Matrix::from_vec(labels.len(), SHAPE.len(), data)?;
    Dataset::new(images, labels, format.classes(), SHAPE)
}

/// Loads the standard layout: `data_batch_1..5.bin` for training and
/// `test_batch.bin` for testing.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok((load_cifar10(&train)?, load_cifar10(&[dir.join("test_batch.bin")])?))
}
