//! Labelled image sets in the IDX format.

use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::{RngStream, Scalar, Tensor};

/// Images `[N, C, H, W]` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Parses an IDX file of unsigned bytes into `(dims, values)`.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let bad = |d: String| Error::format("IDX file", d);
    ensure_format(bytes.len() >= 4, || bad("shorter than its header".into()))?;
    ensure_format(bytes[0] == 0 && bytes[1] == 0, || bad("bad magic".into()))?;
    ensure_format(bytes[2] == 0x08, || bad(format!("element type {:#04x} is not u8", bytes[2])))?;
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    ensure_format(bytes.len() >= header, || bad("truncated dimensions".into()))?;
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    ensure_format(bytes.len() == header + n, || {
        bad(format!("expected {n} values after the header, found {}", bytes.len() - header))
    })?;
    Ok((dims, &bytes[header..]))
}

fn ensure_format(cond: bool, err: impl FnOnce() -> Error) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a `[N, H, W]` image file and an `[N]` label file; pixels are scaled
/// to `[0, 1]` and a channel axis is added.
pub fn load_idx_pair<T: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset<T>> {
    let (ib, lb) = (read(images.as_ref())?, read(labels.as_ref())?);
    let (idims, pixels) = parse_idx(&ib)?;
    let (ldims, raw_labels) = parse_idx(&lb)?;
    ensure!(idims.len() == 3, "image file must be rank 3, got {idims:?}");
    ensure!(ldims == [idims[0]], "label file {ldims:?} does not match {} images", idims[0]);
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    ensure!(labels.iter().all(|&l| l < classes), "label outside 0..{classes}");
    let values = pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect();
    Ok(Dataset {
        images: Tensor::new([idims[0], 1, idims[1], idims[2]], values)?,
        labels,
        classes,
    })
}

/// Directory holding the bundled 14 × 14 digit subset.
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// Training (2000 images) and test (1000 images) splits of the bundled
/// 14 × 14 digits, or of the same-named files under `dir`.
pub fn load_mnist14<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = dir.as_ref();
    let train = load_idx_pair(d.join("mnist14-train-images.idx3-ubyte"), d.join("mnist14-train-labels.idx1-ubyte"), 10)?;
    let test = load_idx_pair(d.join("mnist14-test-images.idx3-ubyte"), d.join("mnist14-test-labels.idx1-ubyte"), 10)?;
    Ok((train, test))
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Dataset<T>> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Examples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset<T>> {
        let s = self.images.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            ensure!(i < self.len(), "example {i} out of range");
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        Ok(Dataset {
            images: Tensor::new(shape, data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Shuffled mini-batch index lists covering every example once.
    pub fn batches(&self, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}
