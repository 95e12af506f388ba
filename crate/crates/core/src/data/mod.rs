//! Labeled image datasets and their on-disk formats.

pub mod cifar;
pub mod idx;
pub mod synthetic;

use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cifar::load_cifar_binary;
pub use idx::{load_idx, read_idx_images, read_idx_labels, save_idx, write_idx_images, write_idx_labels};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Images in `[0, 1]` (`[n, channels, height, width]`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().is_empty() {
            return Err(LabError::InvalidTensor("dataset images need a batch axis".into()));
        }
        if images.batch_len() != labels.len() {
            return Err(LabError::ShapeMismatch {
                expected: vec![images.batch_len()],
                actual: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(LabError::InvalidLabel { label, num_classes });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        self.images.item_shape()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` items (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Same images with replacement labels.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.images.clone(), labels, self.num_classes)
    }

    pub fn into_parts(self) -> (Tensor<T>, Vec<usize>, usize) {
        (self.images, self.labels, self.num_classes)
    }
}
