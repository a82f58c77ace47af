//! Datasets: MNIST IDX files, synthetic Gaussian blobs, deterministic
//! splitting and minibatch iteration.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.select(indices);
        Dataset {
            inputs: b.inputs,
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Concatenates two datasets with the same width and class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() || self.num_classes != other.num_classes {
            return Err(Error::Data("cannot concatenate datasets of different shapes".into()));
        }
        let inputs = ndarray::concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::Data(e.to_string()))?;
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Dataset::new(inputs, labels, self.num_classes)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            needed: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = read_u32_be(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            needed: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| read_u32_be(&bytes, 4 + 4 * i) as usize).collect();
    let needed = header + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.into(),
            needed: needed as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((dims, bytes[header..needed].to_vec()))
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` by
/// dividing by 255; the class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let d = idims[1] * idims[2];
    let inputs = Array2::from_shape_vec((idims[0], d), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("shape checked against byte count");
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, k)
}

/// Loads the standard MNIST file names from `dir`: returns `(train, test)`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Writes `ds` as an IDX pair with images of shape `rows × cols`. Inputs are
/// quantized to bytes as `round(255·x)` clamped to `[0, 255]`.
pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::Data(format!(
            "image shape {rows}x{cols} does not match input width {}",
            ds.dim()
        )));
    }
    if ds.num_classes > 256 {
        return Err(Error::Data("IDX labels are single bytes".into()));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend(ds.inputs.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// `k` cluster centers in `dim` dimensions with i.i.d. standard normal
/// coordinates.
pub fn blob_means(k: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((k, dim), || StandardNormal.sample(&mut rng))
}

/// `per_class` points around each row of `means` with isotropic noise of
/// standard deviation `spread`, ordered class by class.
pub fn blobs_around(means: &Array2<f64>, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let (k, dim) = means.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut inputs = Array2::zeros((k * per_class, dim));
    let mut labels = Vec::with_capacity(k * per_class);
    for (i, mut row) in inputs.rows_mut().into_iter().enumerate() {
        let c = i / per_class;
        for (x, &mu) in row.iter_mut().zip(means.row(c)) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = mu + spread * z;
        }
        labels.push(c);
    }
    Dataset::new(inputs, labels, k)
}

/// `k` isotropic Gaussian clusters of `per_class` points each.
pub fn synth_blobs(k: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {k}")));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::Config("blobs need per_class >= 1 and dim >= 1".into()));
    }
    blobs_around(&blob_means(k, dim, seed), per_class, spread, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Seeded permutation of `0..n`; `stream` selects an independent sequence.
pub fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Random disjoint split; the train side gets `floor(N·fraction)` rows.
pub fn split(ds: &Dataset, cfg: SplitConfig) -> Result<(Dataset, Dataset)> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {}",
            cfg.train_fraction
        )));
    }
    let perm = permutation(ds.len(), cfg.seed, 0);
    let n_train = (ds.len() as f64 * cfg.train_fraction).floor() as usize;
    if n_train == 0 || n_train == ds.len() {
        return Err(Error::Data(format!(
            "split of {} rows at fraction {} leaves one side empty",
            ds.len(),
            cfg.train_fraction
        )));
    }
    Ok((ds.subset(&perm[..n_train]), ds.subset(&perm[n_train..])))
}

/// Minibatches covering every row once; the order depends on
/// `(shuffle_seed, epoch)` and the last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    Batches {
        ds,
        order: permutation(ds.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.ds.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}
