//! Datasets: seeded Gaussian blobs, synthetic weight vectors, and IDX files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::numerics::{l2_norm, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { seed: u64, spec: BlobSpec },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × dim`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
    pub source: DataSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers `idx` into a contiguous batch.
    pub fn batch(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.dim {
            return Err(Error::config("dataset features do not match labels × dim"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::config(format!("label {bad} >= num_classes {}", self.num_classes)));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("dataset features must be finite"));
        }
        Ok(())
    }

    /// Splits off the last `n_tail` rows.
    pub fn split_tail(mut self, n_tail: usize) -> (Dataset, Dataset) {
        let n_head = self.len().saturating_sub(n_tail);
        let tail = Dataset {
            features: self.features.split_off(n_head * self.dim),
            labels: self.labels.split_off(n_head),
            dim: self.dim,
            num_classes: self.num_classes,
            source: self.source.clone(),
        };
        (self, tail)
    }
}

/// Class-conditional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub blobs_per_class: usize,
    /// Standard deviation of the blob centers around the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Within-blob standard deviation.
    #[serde(default = "one_f")]
    pub noise: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    3.0
}

/// Samples `spec.n` points; labels cycle through the classes, blobs are picked uniformly.
pub fn make_blobs(spec: &BlobSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.n == 0 || spec.dim == 0 || spec.classes == 0 || spec.blobs_per_class == 0 {
        return Err(Error::config("blob spec needs n, dim, classes, blobs_per_class >= 1"));
    }
    let n_centers = spec.classes * spec.blobs_per_class;
    let centers: Vec<f64> = (0..n_centers * spec.dim).map(|_| rng.normal() * spec.separation).collect();
    let mut features = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let blob = class * spec.blobs_per_class + rng.below(spec.blobs_per_class);
        let c = &centers[blob * spec.dim..(blob + 1) * spec.dim];
        features.extend(c.iter().map(|m| m + spec.noise * rng.normal()));
        labels.push(class);
    }
    Ok(Dataset {
        features,
        labels,
        dim: spec.dim,
        num_classes: spec.classes,
        source: DataSource::Synthetic {
            seed: rng.seed(),
            spec: spec.clone(),
        },
    })
}

/// Synthetic weight vectors: unit directions times log-normal magnitudes
/// `exp(μ + σ·z)`. With `direction_uniform` the directions are uniform on the
/// sphere; otherwise they come from an axis-skewed Gaussian.
pub fn make_weight_vectors(n: usize, dim: usize, direction_uniform: bool, mu: f64, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    let mut dir = vec![0.0; dim];
    for _ in 0..n {
        loop {
            for (j, d) in dir.iter_mut().enumerate() {
                let scale = if direction_uniform { 1.0 } else { 1.0 / (j + 1) as f64 };
                *d = rng.normal() * scale;
            }
            if l2_norm(&dir) > 1e-12 {
                break;
            }
        }
        let norm = l2_norm(&dir);
        let mag = (mu + sigma * rng.normal()).exp();
        out.extend(dir.iter().map(|d| d / norm * mag));
    }
    out
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Images as `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<f64>), IdxError> {
    let magic = be_u32(bytes, 0).ok_or(IdxError::TruncatedHeader)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4).ok_or(IdxError::TruncatedHeader)? as usize;
    let rows = be_u32(bytes, 8).ok_or(IdxError::TruncatedHeader)? as usize;
    let cols = be_u32(bytes, 12).ok_or(IdxError::TruncatedHeader)? as usize;
    let expected = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(IdxError::TruncatedData {
            expected,
            found: body.len(),
        });
    }
    Ok((n, rows, cols, body[..expected].iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, IdxError> {
    let magic = be_u32(bytes, 0).ok_or(IdxError::TruncatedHeader)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4).ok_or(IdxError::TruncatedHeader)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(IdxError::TruncatedData {
            expected: n,
            found: body.len(),
        });
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, features) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        features,
        labels,
        dim: rows * cols,
        num_classes,
        source: DataSource::Idx {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_parses_exactly() {
        // two 2×2 images
        let pixels = [0u8, 1, 2, 3, 252, 253, 254, 255];
        let img = encode_idx_images(2, 2, 2, &pixels);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let (n, r, c, px) = parse_idx_images(&img).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        let expected: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(px, expected);
        assert_eq!(px[0], 0.0);
        assert_eq!(px[1], 1.0 / 255.0);
        assert_eq!(px[7], 1.0);

        let lab = encode_idx_labels(&[3, 7]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 7]);
    }

    #[test]
    fn idx_errors() {
        let img = encode_idx_images(1, 1, 1, &[9]);
        assert_eq!(
            parse_idx_labels(&img),
            Err(IdxError::WrongMagic {
                expected: IDX_LABELS_MAGIC,
                found: IDX_IMAGES_MAGIC
            })
        );
        assert!(parse_idx_labels(&img).unwrap_err().to_string().contains("wrong magic"));
        assert_eq!(parse_idx_images(&[]), Err(IdxError::TruncatedHeader));
        assert_eq!(IdxError::TruncatedHeader.to_string(), "truncated header");
        let short = encode_idx_images(2, 2, 2, &[1, 2, 3]);
        assert!(matches!(parse_idx_images(&short), Err(IdxError::TruncatedData { .. })));
    }

    #[test]
    fn load_idx_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let img = encode_idx_images(2, 1, 2, &[0, 255, 128, 64]);
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::Idx(IdxError::CountMismatch { images: 2, labels: 1 }))
        ));
        std::fs::write(&lp, encode_idx_labels(&[1, 0])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!((ds.dim, ds.num_classes, ds.len()), (2, 2, 2));
        ds.validate().unwrap();
        // byte-exact round trip
        let back: Vec<u8> = ds.features.iter().map(|x| (x * 255.0).round() as u8).collect();
        assert_eq!(encode_idx_images(2, 1, 2, &back), img);
    }

    #[test]
    fn lognormal_sigma_zero_gives_equal_norms() {
        let v = make_weight_vectors(100, 3, true, 0.5, 0.0, &mut Rng::new(1));
        for c in v.chunks(3) {
            assert!((l2_norm(c) - 0.5f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_directions_pass_chi_square() {
        let n = 100_000;
        let v = make_weight_vectors(n, 2, true, 0.0, 1.0, &mut Rng::new(2));
        let mut bins = [0usize; 36];
        for c in v.chunks(2) {
            let a = c[1].atan2(c[0]) + std::f64::consts::PI;
            bins[((a / (2.0 * std::f64::consts::PI) * 36.0) as usize).min(35)] += 1;
        }
        let e = n as f64 / 36.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // χ²(35) upper 1% point
        assert!(chi2 < 57.342, "chi2 = {chi2}");
    }

    #[test]
    fn blobs_are_balanced_and_valid() {
        let spec = BlobSpec {
            n: 103,
            dim: 5,
            classes: 4,
            blobs_per_class: 2,
            separation: 3.0,
            noise: 1.0,
        };
        let ds = make_blobs(&spec, &mut Rng::new(3)).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 26);
        let (a, b) = ds.split_tail(3);
        assert_eq!((a.len(), b.len()), (100, 3));
        assert!(make_blobs(&BlobSpec { n: 0, ..spec }, &mut Rng::new(0)).is_err());
    }
}
