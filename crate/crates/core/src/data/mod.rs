//! Labeled image collections, their loaders, and on-disk formats.

pub mod blobs;
pub mod bsyn;
pub mod checkpoint;
pub mod cifar;
pub mod idx;
mod synthetic;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blobs::{make_blobs, BlobSpec};
pub use bsyn::{load_synthetic, save_synthetic, save_synthetic_with_sidecar, PixelDtype};
pub use cifar::{load_cifar10, load_cifar10_dir};
pub use idx::{load_idx, load_idx_with, load_mnist_dir};
pub use synthetic::{Provenance, SyntheticSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and standard deviation per channel of `[n, C, H, W]`.
    pub fn fit(images: &Tensor) -> Result<Self> {
        let (ch, plane) = channel_layout(images)?;
        let mut sum = vec![0.0; ch];
        let mut sq = vec![0.0; ch];
        for (i, chunk) in images.data().chunks(plane).enumerate() {
            let c = i % ch;
            for &v in chunk {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let count = (images.numel() / ch) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        self.apply(images, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, images: &Tensor) -> Result<Tensor> {
        self.apply(images, |v, m, s| v * s + m)
    }

    fn apply(&self, images: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (ch, plane) = channel_layout(images)?;
        if ch != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "{ch} channels vs normalization for {}",
                self.mean.len()
            )));
        }
        let mut out = images.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % ch;
            for v in chunk {
                *v = f(*v, self.mean[c], self.std[c]);
            }
        }
        Ok(out)
    }
}

fn channel_layout(images: &Tensor) -> Result<(usize, usize)> {
    if images.rank() != 4 {
        return Err(Error::BadShape(format!(
            "expected [n, C, H, W], got {:?}",
            images.shape()
        )));
    }
    let s = images.shape();
    Ok((s[1], s[2] * s[3]))
}

/// An immutable labeled image set. Images are stored normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    norm: Normalization,
    bounds: Vec<(f64, f64)>,
    class_index: Vec<Vec<usize>>,
}

/// Range of raw pixel values, before normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RawRange {
    /// Pixels scaled to `[0, 1]`.
    Unit,
    /// Unbounded data: use the observed per-channel extremes.
    Observed,
}

impl Dataset {
    /// Normalizes raw `[n, C, H, W]` images with `norm`, or with statistics
    /// fitted on these images when `norm` is `None`.
    pub fn from_raw(
        name: impl Into<String>,
        split: Split,
        raw: Tensor,
        labels: Vec<usize>,
        classes: usize,
        norm: Option<&Normalization>,
        range: RawRange,
    ) -> Result<Self> {
        let (ch, plane) = channel_layout(&raw)?;
        if labels.len() != raw.rows() {
            return Err(Error::CountMismatch(format!(
                "{} images, {} labels",
                raw.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let norm = match norm {
            Some(n) => n.clone(),
            None => Normalization::fit(&raw)?,
        };
        let raw_bounds: Vec<(f64, f64)> = match range {
            RawRange::Unit => vec![(0.0, 1.0); ch],
            RawRange::Observed => {
                let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); ch];
                for (i, chunk) in raw.data().chunks(plane).enumerate() {
                    let c = i % ch;
                    for &v in chunk {
                        b[c].0 = b[c].0.min(v);
                        b[c].1 = b[c].1.max(v);
                    }
                }
                b
            }
        };
        let bounds = raw_bounds
            .iter()
            .enumerate()
            .map(|(c, (lo, hi))| ((lo - norm.mean[c]) / norm.std[c], (hi - norm.mean[c]) / norm.std[c]))
            .collect();
        let images = norm.normalize(&raw)?;
        let mut class_index = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(Dataset {
            name: name.into(),
            split,
            images,
            labels,
            classes,
            norm,
            bounds,
            class_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn split(&self) -> Split {
        self.split
    }
    pub fn images(&self) -> &Tensor {
        &self.images
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }
    /// Valid normalized pixel range per channel.
    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }
    pub fn class_indices(&self, class: usize) -> Result<&[usize]> {
        self.class_index
            .get(class)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownClass(class))
    }

    /// Images of the given rows.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select_rows(indices)
    }

    /// Raw pixel values of the stored images.
    pub fn denormalized(&self) -> Result<Tensor> {
        self.norm.denormalize(&self.images)
    }

    /// SHA-256 over shape, labels and pixel bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a file, inflating it first when it carries a gzip header.
pub fn read_maybe_gz(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        use std::io::Read;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// First of `names`, plain or gzipped, in `root` or one of `subdirs`.
pub fn find_file(root: &Path, subdirs: &[&str], names: &[&str]) -> Option<PathBuf> {
    let dirs = std::iter::once(root.to_path_buf()).chain(subdirs.iter().map(|d| root.join(d)));
    for dir in dirs {
        for name in names {
            for ext in ["", ".gz"] {
                let p = dir.join(format!("{name}{ext}"));
                if p.is_file() {
                    return Some(p);
                }
            }
        }
    }
    None
}

fn require_file(root: &Path, subdirs: &[&str], names: &[&str]) -> Result<PathBuf> {
    find_file(root, subdirs, names).ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found under {}", names[0], root.display()),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip() {
        let raw = Tensor::new(vec![2, 2, 1, 3], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let norm = Normalization::fit(&raw).unwrap();
        let back = norm.denormalize(&norm.normalize(&raw).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_index_partitions() {
        let raw = Tensor::zeros(&[5, 1, 1, 1]);
        let ds = Dataset::from_raw("t", Split::Train, raw, vec![1, 0, 1, 2, 0], 3, None, RawRange::Unit).unwrap();
        let mut all: Vec<usize> = (0..3).flat_map(|c| ds.class_indices(c).unwrap().to_vec()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(ds.class_indices(1).unwrap(), &[0, 2]);
        assert!(matches!(ds.class_indices(3), Err(Error::UnknownClass(3))));
        // Constant images get unit std so the bounds stay finite.
        assert_eq!(ds.bounds(), &[(0.0, 1.0)]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
