//! Datasets: MNIST IDX files, Gaussian blobs, and uniform horizontal
//! partitioning across clients.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::{self, seeded, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples on the leading axis of `images`. IDX images are `[N, H, W, 1]`
/// with pixels scaled into `[0, 1]`; synthetic blobs are `[N, dim]` with
/// unbounded features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.rows() != labels.len() {
            return Err(Error::DimMismatch { images: images.rows(), labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.images.row_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("row-aligned gather"), labels)
    }

    /// First `n` samples (or all of them when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images.slice_rows(0, n), labels: self.labels[..n].to_vec(), classes: self.classes }
    }

    /// Maps every pixel value v to (v - mean) / std.
    pub fn standardized(mut self, mean: f64, std: f64) -> Dataset {
        let inv = 1.0 / std;
        for v in self.images.data_mut() {
            *v = (*v - mean) * inv;
        }
        self
    }
}

/// Pixel mean and standard deviation of the MNIST training images on [0, 1].
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX3 image file body into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let h = be_u32(bytes, 8, "image")? as usize;
    let w = be_u32(bytes, 12, "image")? as usize;
    let need = n * h * w;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated(format!("image payload has {} of {need} bytes", body.len())));
    }
    Ok((n, h, w, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!("label payload has {} of {n} bytes", body.len())));
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair (plain or gzip-compressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read_maybe_gzip(images_path.as_ref())?;
    let lbl_bytes = read_maybe_gzip(labels_path.as_ref())?;
    let (n, h, w, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::DimMismatch { images: n, labels: labels.len() });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, h, w, 1], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

/// Re-encodes `[N, H, W, 1]` images in `[0, 1]` as an IDX3 file.
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// The standard MNIST file names inside `dir` (`.gz` variants preferred
/// when the plain file is absent).
pub fn mnist_paths(dir: impl AsRef<Path>, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let dir = dir.as_ref();
    let stem = if train { "train" } else { "t10k" };
    let pick = |name: String| {
        let plain = dir.join(&name);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{name}.gz"))
        }
    };
    (pick(format!("{stem}-images-idx3-ubyte")), pick(format!("{stem}-labels-idx1-ubyte")))
}

/// Gaussian blobs: class `c` is centred on a seeded random unit vector
/// scaled by `center_scale`, with identity covariance.
#[derive(Debug, Clone)]
pub struct SyntheticBlobs {
    pub dim: usize,
    pub classes: usize,
    centers: Vec<Vec<f64>>,
}

impl SyntheticBlobs {
    pub fn new(dim: usize, classes: usize, seed: u64, center_scale: f64) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "synthetic data needs dim >= 1 and >= 2 classes (got dim {dim}, {classes} classes)"
            )));
        }
        let mut rng = seeded(seed, &[stream::SYNTHETIC, 0]);
        let centers = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * center_scale).collect()
            })
            .collect();
        Ok(Self { dim, classes, centers })
    }

    /// Draws `n` samples with balanced labels `i mod classes`.
    pub fn sample(&self, n: usize, sample_seed: u64) -> Dataset {
        let mut rng = seeded(sample_seed, &[stream::SYNTHETIC, 1]);
        let mut data = Vec::with_capacity(n * self.dim);
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        for &c in &labels {
            data.extend(self.centers[c].iter().map(|m| m + rng::standard_normal(&mut rng)));
        }
        let images = Tensor::new(vec![n, self.dim], data).expect("n x dim");
        Dataset { images, labels, classes: self.classes }
    }
}

/// `n` blob samples around centres at distance 3 from the origin.
pub fn synthetic(n: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    Ok(SyntheticBlobs::new(dim, classes, seed, 3.0)?.sample(n, seed))
}

/// One client's slice of the training set, as indices into the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded shuffle, then contiguous blocks of `⌊N/K⌋`; the first `N mod K`
/// shards take one extra sample.
pub fn partition_uniform(samples: usize, clients: usize, seed: u64) -> Result<Vec<Shard>> {
    if clients == 0 || samples < clients {
        return Err(Error::TooManyClients { clients, samples });
    }
    let mut rng = seeded(seed, &[stream::PARTITION]);
    let order = rng::permutation(samples, &mut rng);
    let base = samples / clients;
    let extra = samples % clients;
    let mut start = 0;
    Ok((0..clients)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let indices = order[start..start + len].to_vec();
            start += len;
            Shard { client_id: k, indices }
        })
        .collect())
}
