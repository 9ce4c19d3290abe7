//! Labelled datasets for the network backend: the IDX reader, a synthetic
//! Gaussian-blob generator and pixel-shift augmentation.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Mat;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs as rows of `x`, labels in `0..classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Mat,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(height, width)` when rows are images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "Dataset rows vs labels",
                expected: x.nrows(),
                found: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidData(format!("label {bad} outside 0..{classes}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite input".into()));
        }
        Ok(Self {
            x,
            labels,
            classes,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn one_hot(&self) -> Mat {
        Mat::from_fn(self.len(), self.classes, |i, k| f64::from(u8::from(self.labels[i] == k)))
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.input_dim();
        Dataset {
            x: Mat::from_fn(idx.len(), d, |r, c| self.x[(idx[r], c)]),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `count` disjoint groups of `size` rows, drawn without replacement.
    pub fn random_groups<R: Rng + ?Sized>(&self, count: usize, size: usize, rng: &mut R) -> Result<Vec<Dataset>> {
        if count * size > self.len() {
            return Err(Error::InvalidData(format!(
                "cannot draw {count} disjoint groups of {size} from {} rows",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        Ok(idx.chunks(size).take(count).map(|c| self.select(c)).collect())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::InvalidData("truncated IDX header".into()))
}

/// Parses an IDX image file (optionally gzipped); pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Mat, (usize, usize))> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::InvalidData(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::InvalidData(format!(
            "IDX image body has {} bytes, header implies {}",
            body.len(),
            n * h * w
        )));
    }
    let d = h * w;
    Ok((Mat::from_fn(n, d, |i, j| f64::from(body[i * d + j]) / 255.0), (h, w)))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::InvalidData(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::InvalidData(format!("IDX label body has {} bytes, header implies {n}", body.len())));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (x, shape) = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let mut ds = Dataset::new(x, labels, classes)?;
    ds.image_shape = Some(shape);
    Ok(ds)
}

/// Train and test splits from a directory holding the four standard
/// (optionally gzipped) MNIST IDX files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for name in [format!("{stem}.gz"), stem.to_string()] {
            let p = dir.join(name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io {
            path: dir.join(stem).display().to_string(),
            message: "file not found".into(),
        })
    };
    let train = read_idx_pair(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
    let test = read_idx_pair(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}

/// Isotropic Gaussian clusters squashed into `(0, 1)` by a logistic map.
pub fn gaussian_blobs<R: Rng + ?Sized>(n: usize, dim: usize, classes: usize, separation: f64, rng: &mut R) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::InvalidParams("need at least one class and one dimension".into()));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| separation * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = Mat::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            x[(i, j)] = 1.0 / (1.0 + (-(centers[labels[i]][j] + z)).exp());
        }
    }
    Dataset::new(x, labels, classes)
}

/// Adds every cyclic shift of each image by up to `radius` pixels along both
/// axes, the unshifted copy included; `(2r+1)²` times the rows.
pub fn shift_augment(ds: &Dataset, radius: usize) -> Result<Dataset> {
    let (h, w) = ds
        .image_shape
        .ok_or_else(|| Error::InvalidData("shift augmentation needs image-shaped rows".into()))?;
    let r = radius as isize;
    let shifts: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    let n = ds.len();
    let mut x = Mat::zeros(n * shifts.len(), h * w);
    let mut labels = Vec::with_capacity(n * shifts.len());
    for (s, &(dy, dx)) in shifts.iter().enumerate() {
        for i in 0..n {
            let row = s * n + i;
            for py in 0..h {
                let sy = (py as isize - dy).rem_euclid(h as isize) as usize;
                for px in 0..w {
                    let sx = (px as isize - dx).rem_euclid(w as isize) as usize;
                    x[(row, py * w + px)] = ds.x[(i, sy * w + sx)];
                }
            }
            labels.push(ds.labels[i]);
        }
    }
    Ok(Dataset {
        x,
        labels,
        classes: ds.classes,
        image_shape: ds.image_shape,
    })
}
