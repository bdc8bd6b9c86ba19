//! Gaussian blobs shaped like images: a fast, fully controlled stand-in
//! for a real dataset.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, RawRange, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `[C, H, W]` of one sample.
    pub shape: [usize; 3],
    /// Euclidean distance between any two class means.
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 10,
            train_per_class: 100,
            test_per_class: 100,
            shape: [1, 4, 4],
            separation: 4.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// Class `c` is centred at `separation / sqrt(2) * e_c`, the vertices
    /// of a regular simplex with edge length `separation`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let dim: usize = self.shape.iter().product();
        let mut m = vec![0.0; dim];
        m[class] = self.separation / std::f64::consts::SQRT_2;
        m
    }
}

fn draw(spec: &BlobSpec, per_class: usize, stream: u64) -> (Tensor, Vec<usize>) {
    let dim: usize = spec.shape.iter().product();
    let mut r = rng::stream(spec.seed, &[stream]);
    let mut data = Vec::with_capacity(spec.classes * per_class * dim);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for c in 0..spec.classes {
        let mean = spec.class_mean(c);
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| {
                let e: f64 = StandardNormal.sample(&mut r);
                m + e
            }));
            labels.push(c);
        }
    }
    let mut shape = vec![spec.classes * per_class];
    shape.extend_from_slice(&spec.shape);
    (Tensor::from_parts(shape, data), labels)
}

/// Train and test splits; the test split reuses the train normalization.
pub fn make_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    let dim: usize = spec.shape.iter().product();
    if spec.classes < 2 {
        return Err(Error::BadShape("blobs need at least two classes".into()));
    }
    if spec.shape.contains(&0) || dim < spec.classes {
        return Err(Error::BadShape(format!(
            "sample shape {:?} has {dim} dimensions, {} classes need at least that many",
            spec.shape, spec.classes
        )));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::BadShape("blobs need samples in both splits".into()));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::InvalidConfig(format!("separation {}", spec.separation)));
    }
    let (train_raw, train_labels) = draw(spec, spec.train_per_class, 0);
    let (test_raw, test_labels) = draw(spec, spec.test_per_class, 1);
    let train = Dataset::from_raw(
        "blobs",
        Split::Train,
        train_raw,
        train_labels,
        spec.classes,
        None,
        RawRange::Observed,
    )?;
    let test = Dataset::from_raw(
        "blobs",
        Split::Test,
        test_raw,
        test_labels,
        spec.classes,
        Some(train.normalization()),
        RawRange::Observed,
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        let spec = BlobSpec {
            classes: 3,
            train_per_class: 5,
            test_per_class: 4,
            shape: [1, 2, 2],
            separation: 2.0,
            seed: 11,
        };
        let (a, at) = make_blobs(&spec).unwrap();
        let (b, bt) = make_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(at, bt);
        assert_eq!(a.len(), 15);
        assert_eq!(at.len(), 12);
        let (c, _) = make_blobs(&BlobSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn mean_geometry() {
        let spec = BlobSpec {
            separation: 10.0,
            ..BlobSpec::default()
        };
        let (m0, m1) = (spec.class_mean(0), spec.class_mean(1));
        let d: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn bad_shapes() {
        let too_small = BlobSpec {
            shape: [1, 2, 2],
            classes: 5,
            ..BlobSpec::default()
        };
        assert!(matches!(make_blobs(&too_small), Err(Error::BadShape(_))));
        let one = BlobSpec {
            classes: 1,
            ..BlobSpec::default()
        };
        assert!(matches!(make_blobs(&one), Err(Error::BadShape(_))));
    }
}
