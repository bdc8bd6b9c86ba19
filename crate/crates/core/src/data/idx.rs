//! IDX files (MNIST, Fashion-MNIST): big-endian magic, dimension sizes,
//! then unsigned bytes. Gzip-compressed files are accepted transparently.

use std::path::Path;

use super::{read_maybe_gz, Dataset, Normalization, RawRange, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        })
    }
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(be_u32(bytes, 0, "images")?, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::TruncatedFile(format!(
            "images: {} pixel bytes, header promises {need}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(be_u32(bytes, 0, "labels")?, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::TruncatedFile(format!(
            "labels: {} bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair normalized by its own statistics.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with(images_path, labels_path, None)
}

/// Loads an image/label file pair; `norm` carries train-split statistics
/// when loading a test split.
pub fn load_idx_with(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    norm: Option<&Normalization>,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = parse_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch(format!(
            "{} images, {} labels",
            images.count,
            labels.len()
        )));
    }
    let file = images_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let split = if file.starts_with("t10k") || file.contains("test") {
        Split::Test
    } else {
        Split::Train
    };
    let raw = Tensor::new(
        vec![images.count, 1, images.rows, images.cols],
        images.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::from_raw(
        name,
        split,
        raw,
        labels.iter().map(|&l| l as usize).collect(),
        IDX_CLASSES,
        norm,
        RawRange::Unit,
    )
}

const MNIST_DIRS: [&str; 3] = ["mnist", "MNIST/raw", "MNIST"];

/// Loads the MNIST train and test splits from a directory holding the four
/// IDX files (plain or gzipped, dashed or dotted names). The test split
/// uses the train statistics.
pub fn load_mnist_dir(root: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let root = root.as_ref();
    let f = |a: &str, b: &str| super::require_file(root, &MNIST_DIRS, &[a, b]);
    let train = load_idx(
        f("train-images-idx3-ubyte", "train-images.idx3-ubyte")?,
        f("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")?,
    )?;
    let test = load_idx_with(
        f("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte")?,
        f("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte")?,
        Some(train.normalization()),
    )?;
    Ok((train, test))
}
