//! Checkpoint files: a JSON header `{version, config, tensors}` padded with
//! spaces to a multiple of 64 bytes, followed by the little-endian f32
//! payloads in directory order. Offsets are relative to the payload start.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    tensors: IndexMap<String, TensorEntry>,
}

/// Named tensors plus the configuration they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_store(config: serde_json::Value, store: &ParamStore<f32>) -> Self {
        Self {
            config,
            tensors: store
                .iter()
                .map(|(k, e)| (k.to_string(), e.tensor.clone()))
                .collect(),
        }
    }

    /// Copies every tensor into `store`; names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.tensors.len() || store.names().any(|n| !self.tensors.contains_key(n))
        {
            return Err(Error::Format(
                "checkpoint tensor directory does not match the model".into(),
            ));
        }
        for (name, t) in &self.tensors {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Same names, order and shapes.
    pub fn same_directory(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut directory = IndexMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            directory.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: directory,
        };
        let mut out = serde_json::to_vec(&header)?;
        let padded = out.len().div_ceil(ALIGN) * ALIGN;
        out.resize(padded, b' ');
        out.reserve(offset as usize);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut stream = serde_json::Deserializer::from_slice(bytes).into_iter::<Header>();
        let header = match stream.next() {
            Some(h) => h.map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?,
            None => return Err(Error::Format("empty checkpoint".into())),
        };
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let start = stream.byte_offset().div_ceil(ALIGN) * ALIGN;
        let payload = bytes
            .get(start..)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let mut tensors = IndexMap::new();
        for (name, entry) in header.tensors {
            let n: usize = entry.shape.iter().product();
            let lo = entry.offset as usize;
            let raw = payload
                .get(lo..lo + 4 * n)
                .ok_or_else(|| Error::Format(format!("payload of {name} is out of bounds")))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t =
                Tensor::from_vec(&entry.shape, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
