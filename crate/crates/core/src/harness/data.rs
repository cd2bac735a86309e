use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// Inputs `[N, D]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() {
            return Err(Error::data(format!("{:?} inputs for {} labels", x.shape(), y.len())));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.row_len()
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    /// The first `n` records (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data(format!("{what}: truncated header at offset {offset}")))
}

/// Reads a file, inflating it when it starts with the gzip magic bytes.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX image file into `[N, rows*cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::data(format!("{what}: magic {magic} at offset 0, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let dim = rows * cols;
    let need = 16 + n * dim;
    if bytes.len() < need {
        return Err(Error::data(format!(
            "{what}: truncated payload, {n} images of {rows}x{cols} need {need} bytes, file ends at offset {}",
            bytes.len()
        )));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, dim], data)
}

/// Parses an IDX label file; every label must be a valid class.
pub fn parse_idx_labels(bytes: &[u8], classes: usize, what: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABEL_MAGIC {
        return Err(Error::data(format!("{what}: magic {magic} at offset 0, expected {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::data(format!(
            "{what}: truncated payload, {n} labels need {} bytes, file ends at offset {}",
            8 + n,
            bytes.len()
        )));
    }
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < classes {
                Ok(b as usize)
            } else {
                Err(Error::data(format!("{what}: label {b} at offset {} is not a class", 8 + i)))
            }
        })
        .collect()
}

pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gzip(images)?, &images.display().to_string())?;
    let y = parse_idx_labels(&read_maybe_gzip(labels)?, MNIST_CLASSES, &labels.display().to_string())?;
    if x.rows() != y.len() {
        return Err(Error::data(format!(
            "{} holds {} images but {} holds {} labels (count at offset 4)",
            images.display(),
            x.rows(),
            labels.display(),
            y.len()
        )));
    }
    Dataset::new(x, y)
}

/// `dir/name`, falling back to `dir/name.gz`.
fn idx_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::data(format!("{} not found (plain or .gz)", plain.display())))
}

/// `(train, test)` from the standard MNIST file names.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_dataset(
        &idx_path(dir, "train-images-idx3-ubyte")?,
        &idx_path(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx_dataset(
        &idx_path(dir, "t10k-images-idx3-ubyte")?,
        &idx_path(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Adds `N(0, variance)` to every input value. No clipping.
pub fn add_gaussian_noise(data: &Dataset, variance: f64, rng: &mut RngStream) -> Dataset {
    if variance == 0.0 {
        return data.clone();
    }
    let sd = variance.sqrt();
    let mut x = data.x.clone();
    for v in x.data_mut() {
        *v += sd * rng.normal();
    }
    Dataset { x, y: data.y.clone() }
}

/// Isotropic unit-variance Gaussian blobs.
///
/// Two classes sit at `±(separation/2) e_0`, so the Bayes accuracy is
/// `Phi(separation / 2)`. With more classes the means are
/// `(separation / sqrt 2) e_c`, pairwise `separation` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            dim: 8,
            separation: 4.0,
            train: 512,
            test: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.train == 0 || self.test == 0 {
            return Err(Error::config(format!("degenerate synthetic spec {self:?}")));
        }
        if self.classes > 2 && self.dim < self.classes {
            return Err(Error::config("synthetic data needs dim >= classes for more than two classes"));
        }
        if !(self.separation >= 0.0) {
            return Err(Error::config("separation must be >= 0"));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        if self.classes == 2 {
            m[0] = if class == 0 { -0.5 } else { 0.5 } * self.separation;
        } else {
            m[class] = self.separation / std::f64::consts::SQRT_2;
        }
        m
    }

    /// Accuracy of the Bayes rule for two classes.
    pub fn bayes_accuracy_two_class(&self) -> f64 {
        0.5 * (1.0 + erf(self.separation / 2.0 / std::f64::consts::SQRT_2))
    }
}

/// Chebyshev-fitted erfc (relative error below 1.2e-7).
fn erf(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let erfc = t * poly.exp();
    if x >= 0.0 {
        1.0 - erfc
    } else {
        erfc - 1.0
    }
}

/// Draws `n` records with uniformly random labels.
pub fn synthetic_dataset(spec: &SyntheticSpec, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.mean(c)).collect();
    let mut x = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(spec.classes);
        y.push(c);
        x.extend(means[c].iter().map(|m| m + rng.normal()));
    }
    Dataset::new(Tensor::new(vec![n, spec.dim], x)?, y)
}
