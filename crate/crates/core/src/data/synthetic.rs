use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a synthetic set came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `bacon`, `dm`, `random`, `herding`, ...
    pub method: String,
    pub seed: u64,
    pub source: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            method: "unknown".into(),
            seed: 0,
            source: String::new(),
        }
    }
}

/// A condensed image set with a fixed block label layout: class `c` owns
/// rows `[c * ipc, (c + 1) * ipc)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    ipc: usize,
    pub provenance: Provenance,
}

impl SyntheticSet {
    pub fn new(images: Tensor, classes: usize, ipc: usize, provenance: Provenance) -> Result<Self> {
        if ipc == 0 || classes == 0 {
            return Err(Error::InvalidConfig("classes and ipc must be at least 1".into()));
        }
        if images.rank() != 4 || images.rows() != classes * ipc {
            return Err(Error::ShapeMismatch(format!(
                "{:?} for {classes} classes × {ipc} images",
                images.shape()
            )));
        }
        let labels = (0..classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
        Ok(SyntheticSet {
            images,
            labels,
            classes,
            ipc,
            provenance,
        })
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

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_rows(&self, class: usize) -> std::ops::Range<usize> {
        class * self.ipc..(class + 1) * self.ipc
    }

    /// The images of one class as `[ipc, C, H, W]`.
    pub fn class_block(&self, class: usize) -> Result<Tensor> {
        if class >= self.classes {
            return Err(Error::UnknownClass(class));
        }
        self.images.select_rows(&self.class_rows(class).collect::<Vec<_>>())
    }

    /// Overwrites one class block.
    pub fn set_class_block(&mut self, class: usize, block: &Tensor) -> Result<()> {
        if class >= self.classes {
            return Err(Error::UnknownClass(class));
        }
        let len = self.images.row_len();
        if block.numel() != self.ipc * len {
            return Err(Error::ShapeMismatch(format!(
                "block of {} values for {} × {len}",
                block.numel(),
                self.ipc
            )));
        }
        let start = class * self.ipc * len;
        self.images.data_mut()[start..start + block.numel()].copy_from_slice(block.data());
        Ok(())
    }

    /// Clamps every pixel into its channel's `(low, high)` bounds.
    pub fn clamp(&mut self, bounds: &[(f64, f64)]) {
        let [ch, h, w] = self.image_shape();
        debug_assert_eq!(bounds.len(), ch);
        for (i, plane) in self.images.data_mut().chunks_mut(h * w).enumerate() {
            let (lo, hi) = bounds[i % ch];
            for v in plane {
                *v = v.clamp(lo, hi);
            }
        }
    }
}
