//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 3072 pixel bytes in channel-major (CHW) order.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar_records<T: Scalar>(bytes: &[u8], path: &Path, images: &mut Vec<T>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % RECORD_LEN != 0 {
        let offset = bytes.len() - bytes.len() % RECORD_LEN;
        return Err(LabError::format(
            path,
            format!(
                "truncated record at byte offset {offset}: file length {} is not a multiple of {RECORD_LEN}",
                bytes.len()
            ),
        ));
    }
    for rec in bytes.chunks_exact(RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(LabError::format(path, format!("label {label} out of range")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| T::from_f64_lossy(b as f64 / 255.0)));
    }
    Ok(())
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<Dataset<T>> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| LabError::io(p, e))?;
        parse_cifar_records(&bytes, p, &mut images, &mut labels)?;
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_assembled_record_parses_exactly() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        fs::write(&p, &rec).unwrap();
        let d = load_cifar_binary::<f64, _>(&[&p]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.images().shape(), &[1, 3, 32, 32]);
        // channel 1, row 0, col 5 is byte 1024 + 5 of the pixel block
        assert_eq!(d.images().data()[1024 + 5], ((1024 + 5) % 256) as f64 / 255.0);
        assert_eq!(d.images().data()[3071], 255.0 / 255.0);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        fs::write(&p, []).unwrap();
        let d = load_cifar_binary::<f64, _>(&[&p]).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn truncated_record_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.bin");
        fs::write(&p, vec![1u8; RECORD_LEN + 100]).unwrap();
        let err = load_cifar_binary::<f64, _>(&[&p]).unwrap_err();
        assert!(err.to_string().contains(&format!("offset {RECORD_LEN}")), "{err}");
    }
}
