//! Binary checkpoint: `EGAT` magic, u32 LE version, u64 LE header length,
//! a JSON header, then raw little-endian f64 tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGAT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Model weights plus optional optimizer moments and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Adam first and second moments, in weight layout.
    pub moments: Option<(Weights, Weights)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            moments: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.params.config;
        let layout = Weights::layout(cfg);
        let mut groups: Vec<(&str, &Weights)> = vec![("", &self.params.weights)];
        if let Some((m, v)) = &self.moments {
            groups.push(("adam.m.", m));
            groups.push(("adam.v.", v));
        }
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        for (prefix, w) in &groups {
            for ((name, shape), slice) in layout.iter().zip(w.slices()) {
                tensors.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    shape: shape.clone(),
                    offset: 8 * data.len(),
                });
                data.extend_from_slice(slice);
            }
        }
        let header = serde_json::to_vec(&Header {
            config: cfg.clone(),
            tensors,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let cfg = header.config;
        if cfg.input_scale.len() != cfg.input_width {
            return Err(bad("input scale length does not match input width"));
        }
        let read = |prefix: &str| -> Result<Option<Weights>> {
            let mut w = Weights::zeros(&cfg);
            let layout = Weights::layout(&cfg);
            let mut found = 0;
            for ((name, shape), dst) in layout.iter().zip(w.slices_mut()) {
                let full = format!("{prefix}{name}");
                let Some(t) = header.tensors.iter().find(|t| t.name == full) else {
                    continue;
                };
                if &t.shape != shape {
                    return Err(Error::Checkpoint(format!("tensor {full} has shape {:?}, expected {shape:?}", t.shape)));
                }
                if t.offset % 8 != 0 {
                    return Err(Error::Checkpoint(format!("tensor {full} is misaligned")));
                }
                let start = t.offset / 8;
                let src = data
                    .get(start..start + dst.len())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {full} out of range")))?;
                dst.copy_from_slice(src);
                found += 1;
            }
            match found {
                0 => Ok(None),
                n if n == layout.len() => Ok(Some(w)),
                _ => Err(Error::Checkpoint(format!("incomplete tensor set '{prefix}'"))),
            }
        };
        let weights = read("")?.ok_or_else(|| bad("no model tensors"))?;
        let moments = match (read("adam.m.")?, read("adam.v.")?) {
            (Some(m), Some(v)) => Some((m, v)),
            (None, None) => None,
            _ => return Err(bad("optimizer moments are incomplete")),
        };
        Ok(Checkpoint {
            params: ModelParams { config: cfg, weights },
            moments,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
