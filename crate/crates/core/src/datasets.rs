//! Benchmark datasets: the synthetic Ones task, Digits (CSV), and the IDX
//! files of MNIST and Fashion-MNIST.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, RandomStream, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const DIGITS_FEATURES: usize = 64;
const DIGITS_MAX: u32 = 16;

/// Examples with integer labels. Features lie in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    x: Tensor,
    labels: Vec<usize>,
    classes: usize,
    onehot: Tensor,
}

impl LabeledSet {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Data(format!("need at least two classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("feature value {bad} outside [0,1]")));
        }
        let mut hot = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            hot[i * classes + l] = 1.0;
        }
        let onehot = Tensor::from_parts(vec![labels.len(), classes], hot);
        Ok(Self {
            x,
            labels,
            classes,
            onehot,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn onehot(&self) -> &Tensor {
        &self.onehot
    }

    /// Per-sample feature shape (everything after the sample axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Regression targets for a network with `width` outputs: one-hot
    /// rows, or the label itself as a single column for binary tasks.
    pub fn targets(&self, width: usize) -> Result<Tensor> {
        if width == self.classes {
            Ok(self.onehot.clone())
        } else if width == 1 && self.classes == 2 {
            let col = self.labels.iter().map(|&l| l as f64).collect();
            Ok(Tensor::from_parts(vec![self.len(), 1], col))
        } else {
            Err(Error::Dimension(format!(
                "{} classes cannot be targeted by {width} outputs",
                self.classes
            )))
        }
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} outside set of {}", self.len())));
        }
        Ok(Self {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            onehot: self.onehot.select_rows(indices),
        })
    }

    /// A seeded random subset of `k` examples.
    pub fn sample(&self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::Data(format!("cannot sample {k} of {} examples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RandomStream::with_stream(seed, streams::SUBSET).shuffle(&mut idx);
        idx.truncate(k);
        self.subset(&idx)
    }
}

/// Disjoint train/test partition of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded shuffle, then the first `round(0.8·n)` examples train.
pub fn split_80_20(set: &LabeledSet, seed: u64) -> Result<Split> {
    let n = set.len();
    if n < 5 {
        return Err(Error::Data(format!("cannot split {n} examples 80/20")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RandomStream::with_stream(seed, streams::SPLIT).shuffle(&mut idx);
    let n_train = (0.8 * n as f64).round() as usize;
    let test_indices = idx.split_off(n_train);
    Ok(Split {
        train: set.subset(&idx)?,
        test: set.subset(&test_indices)?,
        seed,
        train_indices: idx,
        test_indices,
    })
}

/// Binary vectors labelled 1 iff their fraction of ones is at least
/// `threshold`, balanced to `n/2` positives.
///
/// Each candidate draws its own Bernoulli rate from U[0,1) and is kept
/// only while its class still has room, so both classes cover the full
/// range of densities on their side of the threshold.
pub fn gen_ones(dim: usize, n: usize, threshold: f64, seed: u64) -> Result<LabeledSet> {
    if dim == 0 || n < 2 || !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "ones needs dim ≥ 1, n ≥ 2 and threshold in (0,1); got dim={dim}, n={n}, threshold={threshold}"
        )));
    }
    let mut quota = [n - n / 2, n / 2];
    let mut rs = RandomStream::new(seed);
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = vec![0.0; dim];
    let max_attempts = 10_000 * n;
    let mut attempts = 0;
    while labels.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "ones generator could not fill class quotas for dim={dim}, threshold={threshold}"
            )));
        }
        let rate = rs.next_f64();
        let mut ones = 0;
        for v in row.iter_mut() {
            let bit = rs.next_f64() < rate;
            ones += bit as usize;
            *v = if bit { 1.0 } else { 0.0 };
        }
        let label = (ones as f64 / dim as f64 >= threshold) as usize;
        if quota[label] > 0 {
            quota[label] -= 1;
            x.extend_from_slice(&row);
            labels.push(label);
        }
    }
    LabeledSet::new(Tensor::from_parts(vec![n, dim], x), labels, 2)
}

/// Parses Digits rows: 64 integers in [0,16] and a label in [0,9].
pub fn parse_digits(text: &str) -> Result<LabeledSet> {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != DIGITS_FEATURES + 1 {
            return Err(Error::Data(format!(
                "digits line {}: expected {} columns, got {}",
                lineno + 1,
                DIGITS_FEATURES + 1,
                fields.len()
            )));
        }
        for (col, field) in fields.iter().enumerate() {
            let v: u32 = field.parse().map_err(|_| {
                Error::Data(format!("digits line {}: {field:?} is not an integer", lineno + 1))
            })?;
            if col < DIGITS_FEATURES {
                if v > DIGITS_MAX {
                    return Err(Error::Data(format!(
                        "digits line {}: feature {v} outside [0,{DIGITS_MAX}]",
                        lineno + 1
                    )));
                }
                x.push(v as f64 / DIGITS_MAX as f64);
            } else if v > 9 {
                return Err(Error::Data(format!("digits line {}: label {v} outside [0,9]", lineno + 1)));
            } else {
                labels.push(v as usize);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("digits file has no rows".into()));
    }
    LabeledSet::new(Tensor::from_parts(vec![labels.len(), DIGITS_FEATURES], x), labels, 10)
}

pub fn load_digits(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_digits(&text)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parses an IDX image file (u8, `n × rows × cols`) and its label file
/// into `n × 1 × rows × cols` pixels scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("labels: bad magic {magic:#010x}")));
    }
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_labels != n {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data("IDX file with an empty extent".into()));
    }
    let pixels = &images[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "images: expected {} payload bytes, found {}",
            n * rows * cols,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::Data(format!(
            "labels: expected {n} payload bytes, found {}",
            label_bytes.len()
        )));
    }
    let x = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    LabeledSet::new(
        Tensor::from_parts(vec![n, 1, rows, cols], x),
        label_bytes.iter().map(|&l| l as usize).collect(),
        10,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels)
}

/// Serializes an image set back to IDX `(images, labels)` bytes.
pub fn write_idx(set: &LabeledSet) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, rows, cols] = <[usize; 4]>::try_from(set.x.shape())
        .map_err(|_| Error::Dimension("IDX needs n × 1 × rows × cols images".into()))?;
    if c != 1 {
        return Err(Error::Dimension("IDX images have a single channel".into()));
    }
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(set.x.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &set.labels {
        let byte = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

/// Canonical IDX file names of one dataset directory.
pub const IDX_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const IDX_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const IDX_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Loads the training partition from a directory of canonical IDX files.
pub fn load_idx_train(dir: impl AsRef<Path>) -> Result<LabeledSet> {
    let dir = dir.as_ref();
    load_idx(dir.join(IDX_TRAIN_IMAGES), dir.join(IDX_TRAIN_LABELS))
}
