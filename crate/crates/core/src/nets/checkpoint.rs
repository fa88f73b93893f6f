//! Named-blob checkpoint container.
//!
//! ```text
//! b"FCKP" | u32 version | u64 header length | header JSON | blob bytes...
//! ```
//!
//! The header lists the stage tag, config hash, step counter, free-form
//! metadata and, per blob, its dtype, shape and byte range. Maps are ordered,
//! so save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::params::tensor_bytes;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: String,
    config_hash: String,
    step: u64,
    meta: BTreeMap<String, serde_json::Value>,
    blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
struct Blob {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config_hash: String,
    pub step: u64,
    pub meta: BTreeMap<String, serde_json::Value>,
    blobs: BTreeMap<String, Blob>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn new(stage: &str, config_hash: &str, step: u64) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            step,
            meta: BTreeMap::new(),
            blobs: BTreeMap::new(),
        }
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        dtype_name(t.dtype())?;
        self.blobs.insert(
            name.to_string(),
            Blob {
                dtype: t.dtype(),
                shape: t.dims().to_vec(),
                bytes: tensor_bytes(t)?,
            },
        );
        Ok(())
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let t = Tensor::from_slice(data, shape, &Device::Cpu)?;
        self.put_tensor(name, &t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blobs.contains_key(name)
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.blobs
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let b = self
            .blobs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
        let t = match b.dtype {
            DType::F32 => {
                let v: Vec<f32> = b
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, b.shape.as_slice(), device)?
            }
            _ => {
                let v: Vec<f64> = b
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, b.shape.as_slice(), device)?
            }
        };
        Ok(t)
    }

    pub fn f32_values(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self.tensor(name, &Device::Cpu)?;
        Ok((t.dims().to_vec(), t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?))
    }

    /// Fails unless the checkpoint was produced under `expected` config hash.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, expected {expected}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = BTreeMap::new();
        let mut offset = 0;
        for (name, b) in &self.blobs {
            blobs.insert(
                name.clone(),
                BlobEntry {
                    dtype: dtype_name(b.dtype)?.to_string(),
                    shape: b.shape.clone(),
                    offset,
                    len: b.bytes.len(),
                },
            );
            offset += b.bytes.len();
        }
        let header = serde_json::to_vec(&Header {
            stage: self.stage.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            meta: self.meta.clone(),
            blobs,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in self.blobs.values() {
            out.extend_from_slice(&b.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let data = &bytes[body..];
        let mut blobs = BTreeMap::new();
        let mut expected_end = 0;
        for (name, e) in header.blobs {
            let dtype = match e.dtype.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(bad(&format!("blob {name}: unknown dtype {other}"))),
            };
            let count: usize = e.shape.iter().product();
            if e.len != count * dtype.size_in_bytes() || e.offset + e.len > data.len() {
                return Err(bad(&format!("blob {name}: inconsistent size")));
            }
            expected_end = expected_end.max(e.offset + e.len);
            blobs.insert(
                name,
                Blob {
                    dtype,
                    shape: e.shape,
                    bytes: data[e.offset..e.offset + e.len].to_vec(),
                },
            );
        }
        if expected_end != data.len() {
            return Err(bad("trailing bytes after blobs"));
        }
        Ok(Self {
            stage: header.stage,
            config_hash: header.config_hash,
            step: header.step,
            meta: header.meta,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
