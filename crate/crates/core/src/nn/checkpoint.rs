//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ATLB" | version: u16 | spec_len: u32 | spec: ASCII architecture string
//!        | parameters as f32, per layer weight then bias
//! ```
//!
//! Parameters are stored as 32-bit floats whatever the in-memory scalar
//! type, so `save ∘ load` is exact for `f32` networks and a rounding
//! projection for `f64` ones.

use std::fs;
use std::path::Path;

use super::arch::Architecture;
use super::network::{Network, Param};
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATLB";
pub const VERSION: u16 = 1;

pub fn encode<T: Scalar>(model: &Network<T>) -> Vec<u8> {
    let spec = model.architecture().to_string();
    let mut out = Vec::with_capacity(10 + spec.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    for t in model.param_tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let corrupt = |m: String| LabError::CorruptedCheckpoint(m);
    if bytes.len() < 10 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(LabError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let spec_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = 10usize
        .checked_add(spec_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("architecture string runs past end of file".into()))?;
    let spec = std::str::from_utf8(&bytes[10..body])
        .ok()
        .filter(|s| s.is_ascii())
        .ok_or_else(|| corrupt("architecture string is not ASCII".into()))?;
    let arch: Architecture = spec
        .parse()
        .map_err(|e| corrupt(format!("architecture string: {e}")))?;
    let expected = 4 * arch.param_count();
    let payload = &bytes[body..];
    if payload.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} parameter bytes, found {}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = |shape: Vec<usize>| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).map(|v| T::from_f64_lossy(v as f64)).collect();
        Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
    };
    let mut params = Vec::with_capacity(arch.layers().len());
    for layer in arch.layers() {
        params.push(match layer.param_shapes() {
            Some((w, b)) => Some(Param {
                weight: take(w)?,
                bias: take(vec![b])?,
            }),
            None => None,
        });
    }
    Network::from_params(arch, params)
}

pub fn save_model<T: Scalar>(model: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| LabError::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes)
}
