//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "SDCKPT\0\0"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header
//! header   hlen bytes: {"architecture": .., "role": .., "tensors": [[name, rows, cols], ..]}
//! values   f64 LE, tensors in header order, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, DenoiserModel, Linear, Role, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    role: Role,
    tensors: Vec<(String, usize, usize)>,
}

pub fn encode_checkpoint(model: &DenoiserModel) -> Vec<u8> {
    let params = model.parameters();
    let header = Header {
        architecture: model.architecture().clone(),
        role: model.role(),
        tensors: params
            .iter()
            .map(|(n, t)| (n.clone(), t.value.nrows(), t.value.ncols()))
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params {
        for v in t.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserModel> {
    let bad = |m: &str| Error::invalid(format!("malformed checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + hlen;
    let header: Header = serde_json::from_slice(bytes.get(16..header_end).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| bad(&e.to_string()))?;
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, rows, cols) in &header.tensors {
        let n = rows * cols;
        let end = offset + 8 * n;
        let chunk = bytes.get(offset..end).ok_or_else(|| bad(&format!("truncated tensor {name}")))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(Array2::from_shape_vec((*rows, *cols), values).unwrap()));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if tensors.len() % 2 != 0 {
        return Err(bad("odd tensor count"));
    }
    let mut it = tensors.into_iter();
    let mut layers = Vec::new();
    while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
        layers.push(Linear { weight, bias });
    }
    DenoiserModel::from_parts(header.architecture, header.role, layers)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::invalid(format!("{}: {m}", path.display())),
        other => other,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"nope").is_err());
        let m = DenoiserModel::new(Architecture::default(), Role::Teacher, 1).unwrap();
        let mut bytes = encode_checkpoint(&m);
        bytes.pop();
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let mut m = DenoiserModel::new(Architecture::default(), Role::Student, 9).unwrap();
        for p in m.parameters_mut() {
            p.value.mapv_inplace(|v| v * std::f64::consts::PI + 1e-300);
        }
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }
}
