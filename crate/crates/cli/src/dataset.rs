//! Readers for the CIFAR-10 binary and MNIST IDX distributions.

use std::fs;
use std::path::{Path, PathBuf};

use msf_core::data::{synthetic, ImageSet};

use crate::config::{DatasetKind, DatasetSettings};
use crate::error::{CliError, CliResult};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    pub train: ImageSet,
    pub test: ImageSet,
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    if !path.is_file() {
        return Err(CliError::usage(format!("dataset file {} not found", path.display())));
    }
    fs::read(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn format_error(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("format error in {}: {msg}", path.display()))
}

fn cifar_file(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<u32>) -> CliResult<()> {
    let bytes = read(path)?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(format_error(
            path,
            format!("expected {CIFAR_FILE_BYTES} bytes, found {}", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(format_error(path, format!("label byte {} outside 0..9", rec[0])));
        }
        labels.push(rec[0] as u32);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// The five train batches and the test batch of the binary CIFAR-10 release.
pub fn ingest_cifar10(dir: &Path) -> CliResult<DatasetStore> {
    let split = |files: &[&str]| -> CliResult<ImageSet> {
        let (mut pixels, mut labels) = (Vec::new(), Vec::new());
        for f in files {
            cifar_file(&dir.join(f), &mut pixels, &mut labels)?;
        }
        Ok(ImageSet::new(CIFAR_SIDE, CIFAR_SIDE, pixels, labels, 10)?)
    };
    Ok(DatasetStore {
        train: split(&CIFAR_TRAIN_FILES)?,
        test: split(&[CIFAR_TEST_FILE])?,
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> CliResult<Vec<usize>> {
    let head = 4 + 4 * dims;
    if bytes.len() < head {
        return Err(format_error(path, format!("{} bytes is shorter than the IDX header", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(format_error(path, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let want = head + shape.iter().product::<usize>();
    if bytes.len() != want {
        return Err(format_error(path, format!("expected {want} bytes, found {}", bytes.len())));
    }
    Ok(shape)
}

fn mnist_split(dir: &Path, images: &str, labels: &str) -> CliResult<ImageSet> {
    let (ip, lp) = (dir.join(images), dir.join(labels));
    let ib = read(&ip)?;
    let lb = read(&lp)?;
    let shape = idx_header(&ip, &ib, MNIST_IMAGE_MAGIC, 3)?;
    let [n, h, w] = shape[..] else { unreachable!() };
    let ln = idx_header(&lp, &lb, MNIST_LABEL_MAGIC, 1)?[0];
    if ln != n {
        return Err(format_error(&lp, format!("{ln} labels for {n} images")));
    }
    let plane = h * w;
    let mut pixels = Vec::with_capacity(3 * n * plane);
    for img in ib[16..].chunks_exact(plane.max(1)) {
        for _ in 0..3 {
            pixels.extend_from_slice(img);
        }
    }
    let labels: Vec<u32> = lb[8..].iter().map(|&l| l as u32).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_error(&lp, format!("label {bad} outside 0..9")));
    }
    Ok(ImageSet::new(h, w, pixels, labels, 10)?)
}

/// MNIST IDX files, grayscale replicated to three channels.
pub fn ingest_mnist(dir: &Path) -> CliResult<DatasetStore> {
    let [(ti, tl), (ei, el)] = MNIST_FILES;
    Ok(DatasetStore {
        train: mnist_split(dir, ti, tl)?,
        test: mnist_split(dir, ei, el)?,
    })
}

fn dataset_dir(s: &DatasetSettings) -> CliResult<PathBuf> {
    let p = s
        .path
        .clone()
        .ok_or_else(|| CliError::usage("dataset.path is not set"))?;
    if !p.is_dir() {
        return Err(CliError::usage(format!("dataset directory {} not found", p.display())));
    }
    Ok(p)
}

fn limit(set: ImageSet, n: usize) -> ImageSet {
    if n == 0 || n >= set.len() {
        set
    } else {
        set.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// Reads the configured dataset and applies the split limits.
pub fn load(s: &DatasetSettings) -> CliResult<DatasetStore> {
    let store = match s.kind {
        DatasetKind::Cifar10 => ingest_cifar10(&dataset_dir(s)?)?,
        DatasetKind::Mnist => ingest_mnist(&dataset_dir(s)?)?,
        DatasetKind::Synthetic => {
            let (side, c, seed) = (s.synthetic_side, s.synthetic_classes, s.synthetic_seed);
            DatasetStore {
                train: synthetic(s.synthetic_train, side, c, seed)?,
                // A different seed stream for held-out images.
                test: synthetic(s.synthetic_test, side, c, seed ^ 0x7e57)?,
            }
        }
    };
    Ok(DatasetStore {
        train: limit(store.train, s.train_limit),
        test: limit(store.test, s.test_limit),
    })
}
