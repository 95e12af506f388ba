//! IDX files (the MNIST / Fashion-MNIST container).
//!
//! Big-endian header: two zero bytes, a type code, the number of
//! dimensions, then one `u32` per dimension. Unsigned-byte images are scaled
//! to `[0, 1]` by `/255`; `f32`/`f64` images are taken as stored, which is
//! how the laboratory persists adversarial images without quantization.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;
const TYPE_F64: u8 = 0x0E;

/// Element encoding for [`write_idx_images`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxPixel {
    /// Bytes, `round(255·v)`; exact only for multiples of 1/255.
    U8,
    /// Big-endian doubles; exact.
    F64,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(LabError::format(path, "bad IDX magic"));
    }
    let (ty, ndim) = (bytes[2], bytes[3] as usize);
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(LabError::format(path, "truncated IDX header"));
    }
    let dims = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    Ok((ty, dims, header))
}

/// Reads an image file with magic `0x0000_0803` (`[n, rows, cols]`) or
/// `0x0000_0804` (`[n, channels, rows, cols]`), or their float variants.
pub fn read_idx_images<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (ty, dims, header) = parse_header(&bytes, path)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        _ => {
            return Err(LabError::format(
                path,
                format!("bad IDX magic: image files need 3 or 4 dimensions, found {}", dims.len()),
            ))
        }
    };
    let count: usize = shape.iter().product();
    let width = match ty {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        TYPE_F64 => 8,
        other => return Err(LabError::format(path, format!("bad IDX magic: unsupported type code {other:#04x}"))),
    };
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(LabError::format(
            path,
            format!("expected {} data bytes for dims {dims:?}, found {}", count * width, body.len()),
        ));
    }
    let data: Vec<T> = match ty {
        TYPE_U8 => body.iter().map(|&b| T::from_f64_lossy(b as f64 / 255.0)).collect(),
        TYPE_F32 => body
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_be_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_be_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| LabError::format(path, e.to_string()))
}

/// Reads a label file with magic `0x0000_0801`.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (ty, dims, header) = parse_header(&bytes, path)?;
    if ty != TYPE_U8 || dims.len() != 1 {
        return Err(LabError::format(path, "bad IDX magic: expected 0x00000801 label file"));
    }
    let body = &bytes[header..];
    if body.len() != dims[0] {
        return Err(LabError::format(
            path,
            format!("label count {} but {} label bytes", dims[0], body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. The class count is `max(label) + 1`,
/// but at least 10 (the IDX datasets in use are ten-class).
pub fn load_idx<T: Scalar>(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let images = read_idx_images(image_path.as_ref())?;
    let labels = read_idx_labels(label_path.as_ref())?;
    if images.batch_len() != labels.len() {
        return Err(LabError::format(
            label_path.as_ref(),
            format!(
                "length mismatch: {} images but {} labels",
                images.batch_len(),
                labels.len()
            ),
        ));
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(images, labels, classes)
}

fn header(ty: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, ty, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes `[n, channels, h, w]` images. Single-channel data uses the
/// three-dimensional layout so standard MNIST readers accept it. Flat
/// `[n, d]` and `[n, h, w]` batches are stored as one-row and one-channel
/// images; callers that need the original shape record it separately.
pub fn write_idx_images<T: Scalar>(path: impl AsRef<Path>, images: &Tensor<T>, pixel: IdxPixel) -> Result<()> {
    let path = path.as_ref();
    let s = images.shape();
    let dims: Vec<usize> = match s {
        [n, d] => vec![*n, 1, *d],
        [_, _, _] => s.to_vec(),
        [n, 1, h, w] => vec![*n, *h, *w],
        [_, _, _, _] => s.to_vec(),
        _ => {
            return Err(LabError::InvalidTensor(format!(
                "IDX images need two to four dimensions, got {s:?}"
            )))
        }
    };
    let mut out = match pixel {
        IdxPixel::U8 => header(TYPE_U8, &dims),
        IdxPixel::F64 => header(TYPE_F64, &dims),
    };
    for &v in images.data() {
        let v = v.to_f64_lossy();
        match pixel {
            IdxPixel::U8 => out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
            IdxPixel::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = header(TYPE_U8, &[labels.len()]);
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| LabError::InvalidLabel {
            label: l,
            num_classes: 256,
        })?;
        out.push(b);
    }
    fs::write(path, out).map_err(|e| LabError::io(path, e))
}

/// Writes a dataset as an image/label pair.
pub fn save_idx<T: Scalar>(
    data: &Dataset<T>,
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
    pixel: IdxPixel,
) -> Result<()> {
    write_idx_images(image_path, data.images(), pixel)?;
    write_idx_labels(label_path, data.labels())
}
