//! Dataset loading: MNIST IDX files (optionally gzipped), CIFAR-10 binary
//! batches and a seeded synthetic set for smoke tests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::{Error, Result};

pub const DATA_DIR_ENV: &str = "REBNN_DATA_DIR";
pub const DEFAULT_MNIST_DIR: &str = "data/mnist-subset";

const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// In-memory labelled images, stored sample-major as `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != labels.len() * per {
            return Err(Error::dim(
                "dataset",
                format!("{} values for {} samples of {shape:?}", images.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain {
                op: "dataset",
                detail: format!("label {bad} outside {classes} classes"),
            });
        }
        Ok(Self {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    /// Gathers `indices` into a `[B, C, H, W]` tensor and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::dim("dataset", "empty batch"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index {
                op: "dataset",
                index: i,
                bound: self.len(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        Ok((
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Keeps `n` samples chosen by a seeded shuffle, in original order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        let images = idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.shape, self.classes)
    }

    fn normalize(&mut self, mean: &[f32], std: &[f32]) {
        let plane = self.shape[1] * self.shape[2];
        let per = self.shape[0] * plane;
        for (k, v) in self.images.iter_mut().enumerate() {
            let c = (k % per) / plane;
            let (m, s) = (mean[c.min(mean.len() - 1)], std[c.min(std.len() - 1)]);
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Directory holding the files; falls back to `REBNN_DATA_DIR`, then
    /// `data/mnist-subset` for MNIST.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

fn default_split() -> Split {
    Split::Train
}

impl DatasetSpec {
    pub fn mnist(path: Option<PathBuf>) -> Self {
        Self {
            name: DatasetName::Mnist,
            path,
            split: Split::Train,
            subset_size: None,
            normalization: None,
        }
    }

    pub fn synthetic(n: usize) -> Self {
        Self {
            name: DatasetName::Synthetic,
            path: None,
            split: Split::Train,
            subset_size: Some(n),
            normalization: None,
        }
    }

    fn default_normalization(&self) -> Normalization {
        match self.name {
            DatasetName::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetName::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            DatasetName::Synthetic => Normalization {
                mean: vec![0.0],
                std: vec![1.0],
            },
        }
    }

    fn root(&self) -> PathBuf {
        self.path
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
    }

    /// Loads, subsets (seeded) and normalises the split.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let mut ds = match self.name {
            DatasetName::Mnist => load_mnist(&self.root(), self.split)?,
            DatasetName::Cifar10 => load_cifar10(&self.root(), self.split)?,
            DatasetName::Synthetic => synthetic(self.subset_size.unwrap_or(256), [1, 8, 8], 4, seed)?,
        };
        if let Some(n) = self.subset_size {
            ds = ds.subset(n, seed)?;
        }
        if ds.is_empty() {
            return Err(Error::MissingDataset(format!(
                "{:?} split {:?} is empty",
                self.name, self.split
            )));
        }
        let norm = self
            .normalization
            .clone()
            .unwrap_or_else(|| self.default_normalization());
        if norm.mean.is_empty() || norm.std.is_empty() || norm.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config(
                "normalization needs non-empty mean and positive std".into(),
            ));
        }
        ds.normalize(&norm.mean, &norm.std);
        Ok(ds)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompress {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// First existing file among `stem` and `stem.gz` under `dir`.
fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.join(stem), dir.join(format!("{stem}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn format_error(path: &Path, expected: impl Into<String>, actual: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        expected: expected.into(),
        actual: actual.into(),
    }
}

/// Parses an IDX3 image file into `(pixels / 255, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    if bytes.len() < 16 {
        return Err(format_error(
            path,
            "IDX3 header of 16 bytes",
            format!("{} bytes", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(format_error(
            path,
            format!("magic {MNIST_IMAGE_MAGIC:#010x}"),
            format!("magic {magic:#010x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(format_error(
            path,
            format!("{want} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    Ok((bytes[16..].iter().map(|&b| b as f32 / 255.0).collect(), n, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(format_error(
            path,
            "IDX1 header of 8 bytes",
            format!("{} bytes", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(format_error(
            path,
            format!("magic {MNIST_LABEL_MAGIC:#010x}"),
            format!("magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_error(
            path,
            format!("{} bytes", 8 + n),
            format!("{} bytes", bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST split (raw pixels scaled to `[0, 1]`, not normalised).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images_stem = format!("{prefix}-images-idx3-ubyte");
    let labels_stem = format!("{prefix}-labels-idx1-ubyte");
    let missing = |stem: &str| {
        Error::MissingDataset(format!(
            "{stem}[.gz] not found in {}; set {DATA_DIR_ENV} or run scripts/fetch_mnist_subset.py",
            dir.display()
        ))
    };
    let ip = find_file(dir, &images_stem).ok_or_else(|| missing(&images_stem))?;
    let lp = find_file(dir, &labels_stem).ok_or_else(|| missing(&labels_stem))?;
    load_mnist_idx(&ip, &lp)
}

/// Reads an IDX3 image file and its IDX1 label file (either may be gzipped).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, n, rows, cols) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let label_values = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if label_values.len() != n {
        return Err(format_error(
            labels,
            format!("{n} labels"),
            format!("{} labels", label_values.len()),
        ));
    }
    Dataset::new(pixels, label_values, [1, rows, cols], 10)
}

/// Loads CIFAR-10 binary batches (`data_batch_{1..5}.bin` or `test_batch.bin`).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let path = dir.join(f);
        if !path.is_file() {
            return Err(Error::MissingDataset(format!("{} not found", path.display())));
        }
        let bytes = read_maybe_gz(&path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_error(
                &path,
                format!("multiple of {CIFAR_RECORD} bytes"),
                format!("{} bytes", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new(images, labels, [3, 32, 32], 10)
}

/// Gaussian class clusters: each class has a random mean image and samples
/// add unit noise scaled by 0.5.
pub fn synthetic(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let per = shape.iter().product::<usize>();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        images.extend(centers[c].iter().map(|&m| m + 0.5 * normal.sample(&mut rng)));
        labels.push(c);
    }
    Dataset::new(images, labels, shape, classes)
}
