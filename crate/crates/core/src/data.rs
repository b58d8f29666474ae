//! Dataset ingestion: MNIST IDX files and seeded synthetic Gaussian blobs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{usage, Error, Result};
use crate::linalg::Matrix;

/// IDX magic for unsigned-byte images (3 dimensions).
pub const IDX_IMAGES_MAGIC: u32 = 2051;
/// IDX magic for unsigned-byte labels (1 dimension).
pub const IDX_LABELS_MAGIC: u32 = 2049;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const MNIST_CLASSES: usize = 10;

/// Features in `[0, 1]` (one row per sample) and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return usage(format!("split has {} feature rows but {} labels", features.rows(), labels.len()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let cols = self.features.cols();
        Self {
            features: Matrix::new(n, cols, self.features.as_slice()[..n * cols].to_vec())
                .expect("prefix of a valid matrix"),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Split,
    pub test: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn dims(&self) -> usize {
        self.train.dims()
    }
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` pixel bytes in file order.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }

    /// Flattens each image into a feature row scaled by `1/255`.
    pub fn to_features(&self) -> Matrix {
        let data = self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
        Matrix::new(self.count(), self.rows * self.cols, data).expect("consistent idx shape")
    }
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, message: message.into() })
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err(bytes.len(), format!("truncated header: need 4 bytes at {offset}")),
    }
}

/// Validates the magic and returns the dimension sizes and payload start.
fn parse_header(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, usize)> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected_magic {
        return format_err(0, format!("bad magic {magic} (expected {expected_magic})"));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * ndim;
    let Some(expected) = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) else {
        return format_err(4, format!("dimensions {dims:?} overflow"));
    };
    let available = bytes.len() - start;
    if available < expected {
        return format_err(bytes.len(), format!("truncated payload: {available} of {expected} bytes present"));
    }
    if available > expected {
        return format_err(start + expected, format!("{} trailing bytes", available - expected));
    }
    Ok((dims, start))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let (dims, start) = parse_header(bytes, IDX_IMAGES_MAGIC)?;
    Ok(IdxImages { rows: dims[1], cols: dims[2], pixels: bytes[start..].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, start) = parse_header(bytes, IDX_LABELS_MAGIC)?;
    Ok(bytes[start..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.count(), images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Parses a matching pair of IDX files into `[0, 1]`-scaled features and
/// labels. Nothing is returned unless both files validate completely.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Split> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.count() != labels.len() {
        return format_err(
            4,
            format!(
                "{} has {} labels but {} has {} images",
                labels_path.display(),
                labels.len(),
                images_path.display(),
                images.count()
            ),
        );
    }
    Split::new(images.to_features(), labels.into_iter().map(usize::from).collect())
}

/// Loads the four canonical MNIST files from `dir`, keeping at most
/// `train_limit` / `test_limit` leading samples of each split.
pub fn load_mnist(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Dataset> {
    let mut train = load_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
    let mut test = load_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
    for (split, file) in [(&train, MNIST_TRAIN_LABELS), (&test, MNIST_TEST_LABELS)] {
        if let Some(i) = split.labels.iter().position(|&y| y >= MNIST_CLASSES) {
            return format_err(8 + i, format!("label {} out of range in {file}", split.labels[i]));
        }
    }
    if let Some(n) = train_limit {
        train = train.truncated(n);
    }
    if let Some(n) = test_limit {
        test = test.truncated(n);
    }
    if train.is_empty() || test.is_empty() {
        return usage("MNIST subset is empty");
    }
    Ok(Dataset { name: "mnist".into(), train, test, class_count: MNIST_CLASSES })
}

/// RNG stream used for blob centres.
const BLOB_CENTER_STREAM: u64 = 1;
/// RNG stream used for blob samples.
const BLOB_SAMPLE_STREAM: u64 = 2;

/// Gaussian blobs around `classes` random centres in the unit cube.
///
/// Uses ChaCha8 seeded with `seed`: centres are drawn on stream 1 by
/// rejection so that every pair is at least `6 · spread` apart, samples on
/// stream 2 as `centre + spread · N(0, I)` clamped to `[0, 1]`. Each class
/// contributes its first 80% (at least one, at most `per_class − 1`) of
/// samples to the training split and the rest to the test split.
pub fn synthetic_blobs(classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dims < 1 {
        return usage(format!("synthetic blobs need >= 2 classes and >= 1 dim, got {classes}, {dims}"));
    }
    if per_class < 2 {
        return usage("synthetic blobs need >= 2 samples per class");
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return usage(format!("spread must be finite and >= 0, got {spread}"));
    }
    let min_sep = 6.0 * spread;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BLOB_CENTER_STREAM);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    const MAX_TRIES: usize = 100_000;
    let mut tries = 0;
    while centers.len() < classes {
        tries += 1;
        if tries > MAX_TRIES {
            return usage(format!("cannot place {classes} centres {min_sep} apart in {dims} dims; reduce spread"));
        }
        let cand: Vec<f64> = (0..dims).map(|_| rng.random_range(0.1..0.9)).collect();
        let ok = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_sep && d2 > 0.0
        });
        if ok {
            centers.push(cand);
        }
    }

    let n_train = (per_class * 4 / 5).clamp(1, per_class - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BLOB_SAMPLE_STREAM);
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, c) in centers.iter().enumerate() {
        for i in 0..per_class {
            let (xs, ys) = if i < n_train { (&mut tr_x, &mut tr_y) } else { (&mut te_x, &mut te_y) };
            for &m in c {
                let z: f64 = StandardNormal.sample(&mut rng);
                xs.push((m + spread * z).clamp(0.0, 1.0));
            }
            ys.push(k);
        }
    }
    let train = Split::new(Matrix::new(tr_y.len(), dims, tr_x)?, tr_y)?;
    let test = Split::new(Matrix::new(te_y.len(), dims, te_x)?, te_y)?;
    Ok(Dataset { name: format!("blobs-c{classes}-d{dims}"), train, test, class_count: classes })
}
