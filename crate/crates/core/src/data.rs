//! Datasets: MNIST IDX files, stratified subsets, and Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W` or `N×D`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() < 2 || n != labels.len() {
            return Err(Error::Dimension(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (without the batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_leading(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.num_classes, name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            offset,
            needed: offset + 4 - bytes.len().min(offset + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed: offset + len - bytes.len(),
    })
}

/// Parses big-endian IDX image bytes into `(count, rows, cols, pixels/255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, path)?;
    Ok((n, rows, cols, pixels.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the number
/// of classes is `max(label) + 1` (at least 10 for MNIST-style files).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, ip)?;
    let labels = parse_idx_labels(&lb, lp)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            offset: 4,
            images: n,
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let name = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, num_classes, name)
}

/// Encodes `N×1×H×W` images in `[0, 1]` as IDX bytes (rounding to the nearest byte).
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("IDX images need one channel, got {c}")));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Class-stratified sample of `n` examples, deterministic in `seed`.
///
/// Each class receives `n / classes` examples (the first `n % classes` classes
/// one more); a class that runs short hands its remaining quota to the others
/// in class order. The result is shuffled.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Config(format!(
            "subset size {n} out of range 1..={}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let mut quota: Vec<usize> = (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect();
    let mut spare = 0;
    for (q, idx) in quota.iter_mut().zip(&by_class) {
        if *q > idx.len() {
            spare += *q - idx.len();
            *q = idx.len();
        }
    }
    while spare > 0 {
        let before = spare;
        for (q, idx) in quota.iter_mut().zip(&by_class) {
            if spare > 0 && *q < idx.len() {
                *q += 1;
                spare -= 1;
            }
        }
        debug_assert!(spare < before, "n <= len guarantees progress");
    }
    let mut chosen: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(idx, &q)| idx[..q].iter().copied())
        .collect();
    chosen.shuffle(&mut rng);
    ds.select(&chosen, format!("{}[subset {n}]", ds.name))
}

/// Unit-variance Gaussian blobs. Class `c < dim` sits at `r·e_c`, class
/// `dim ≤ c < 2·dim` at `−r·e_{c−dim}`, with `r = separation/√2`, so
/// neighbouring centers are `separation` apart. Labels cycle `0, 1, …`.
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes || dim < 2 || classes > 2 * dim || separation < 0.0 {
        return Err(Error::Config(format!(
            "blobs need n >= classes >= 2, dim >= 2, classes <= 2*dim, separation >= 0 \
             (got n = {n}, classes = {classes}, dim = {dim}, separation = {separation})"
        )));
    }
    let r = separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let (axis, sign) = if c < dim { (c, 1.0) } else { (c - dim, -1.0) };
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z + if j == axis { sign * r } else { 0.0 });
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        classes,
        format!("blobs(sep={separation})"),
    )
}
