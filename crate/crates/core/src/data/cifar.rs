//! CIFAR-10 binary batches: 3073-byte records of one label byte followed
//! by the red, green and blue 32×32 planes.

use std::path::Path;

use super::{read_maybe_gz, Dataset, Normalization, RawRange, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + 3 * SIDE * SIDE;
const CLASSES: usize = 10;

/// Splits raw batch bytes into labels and `[0, 1]`-scaled pixels.
pub fn parse_records(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is not a whole number of {RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / RECORD * (RECORD - 1));
    for rec in bytes.chunks(RECORD) {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: CLASSES,
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((labels, pixels))
}

/// Loads and concatenates batch files. The split is `Test` when every
/// file name mentions `test`.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P], norm: Option<&Normalization>) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::InvalidConfig("no CIFAR-10 batch files given".into()));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in batch_paths {
        let (l, px) = parse_records(&read_maybe_gz(p)?)?;
        labels.extend(l);
        pixels.extend(px);
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let is_test = batch_paths
        .iter()
        .all(|p| p.as_ref().to_string_lossy().contains("test"));
    let split = if is_test { Split::Test } else { Split::Train };
    let raw = Tensor::new(vec![labels.len(), 3, SIDE, SIDE], pixels)?;
    Dataset::from_raw("cifar10", split, raw, labels, CLASSES, norm, RawRange::Unit)
}

const CIFAR_DIRS: [&str; 2] = ["cifar-10-batches-bin", "cifar10"];

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10_dir(root: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let root = root.as_ref();
    let train_paths = (1..=5)
        .map(|i| super::require_file(root, &CIFAR_DIRS, &[&format!("data_batch_{i}.bin")]))
        .collect::<Result<Vec<_>>>()?;
    let train = load_cifar10(&train_paths, None)?;
    let test_path = super::require_file(root, &CIFAR_DIRS, &["test_batch.bin"])?;
    let test = load_cifar10(&[test_path], Some(train.normalization()))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3 * SIDE * SIDE).map(|i| (i % 251) as u8));
        r
    }

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        std::fs::write(&p, record(4)).unwrap();
        let ds = load_cifar10(&[&p], None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[4]);
        assert_eq!(ds.image_shape(), [3, 32, 32]);
        let raw = ds.denormalized().unwrap();
        for (v, &b) in raw.data().iter().zip(&record(4)[1..]) {
            assert!((v * 255.0 - b as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn truncated_and_bad_label() {
        let mut bytes = record(1);
        bytes.pop();
        assert!(matches!(parse_records(&bytes), Err(Error::TruncatedFile(_))));
        assert!(matches!(
            parse_records(&record(10)),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }
}
