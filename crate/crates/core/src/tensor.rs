//! Dense row-major tensors.

use crate::error::{LabError, Result};
use crate::scalar::{l2_norm, Scalar};

/// Dense n-dimensional array. The leading axis is the batch axis wherever a
/// tensor carries a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(LabError::InvalidTensor(format!(
                "zero-sized axis in {shape:?} with {} values",
                data.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LabError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::InvalidTensor(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Internal constructor for results of arithmetic that is known to be
    /// shape-consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading axis.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape without the leading axis.
    pub fn item_shape(&self) -> &[usize] {
        if self.shape.is_empty() {
            &[]
        } else {
            &self.shape[1..]
        }
    }

    /// Number of values per item along the leading axis.
    pub fn item_len(&self) -> usize {
        self.item_shape().iter().product()
    }

    pub fn item(&self, i: usize) -> &[T] {
        let k = self.item_len();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let k = self.item_len();
        &mut self.data[i * k..(i + 1) * k]
    }

    /// Copies items `indices` into a new batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let k = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Contiguous sub-batch `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let k = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * k..end * k].to_vec(),
        }
    }

    /// Stacks equally shaped items into a batch tensor.
    pub fn stack(item_shape: &[usize], items: &[&[T]]) -> Result<Self> {
        let k: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * k);
        for it in items {
            if it.len() != k {
                return Err(LabError::ShapeMismatch {
                    expected: item_shape.to_vec(),
                    actual: vec![it.len()],
                });
            }
            data.extend_from_slice(it);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Ok(Self { shape, data })
    }

    /// Concatenates batches along the leading axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::InvalidTensor("concat of zero tensors".into()))?;
        let item = first.item_shape().to_vec();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.item_shape() != item.as_slice() {
                return Err(LabError::ShapeMismatch {
                    expected: item.clone(),
                    actual: p.item_shape().to_vec(),
                });
            }
            n += p.batch_len();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&item);
        Ok(Self { shape, data })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(LabError::ShapeMismatch {
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn l2_norm(&self) -> T {
        l2_norm(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. for checkpoint storage.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}
