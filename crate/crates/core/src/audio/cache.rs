//! Feature cache: `"LMEL"`, u32 version, u32 frames, u32 mel bins, then
//! `frames · bins` little-endian f32 values, row-major over time.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LMEL_MAGIC: &[u8; 4] = b"LMEL";
pub const LMEL_VERSION: u32 = 1;
const HEADER: usize = 16;

pub(crate) fn encode(frames: &Tensor<f32>) -> Result<Vec<u8>> {
    if frames.rank() != 2 {
        return Err(Error::Dimension(format!(
            "feature cache needs T×M, got {:?}",
            frames.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * frames.len());
    out.extend_from_slice(LMEL_MAGIC);
    out.extend_from_slice(&LMEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(frames.shape()[1] as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER || &bytes[..4] != LMEL_MAGIC {
        return Err(Error::Format("not an LMEL feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != LMEL_VERSION {
        return Err(Error::Format(format!("unsupported LMEL version {version}")));
    }
    let (t, m) = (word(8) as usize, word(12) as usize);
    let body = &bytes[HEADER..];
    if body.len() != 4 * t * m {
        return Err(Error::Format(format!(
            "LMEL body holds {} bytes, header promises {t}×{m} values",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&[t, m], data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_lmel(path: impl AsRef<Path>, frames: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(frames)?).map_err(|e| Error::io(path, e))
}

pub fn read_lmel(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
