//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! a JSON header, then every array as little-endian `f64` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mae::{AdamW, MaeConfig, MaeModel};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CMAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Reid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in `f64` elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    epoch: usize,
    seed: u64,
    config: MaeConfig,
    params: Vec<ArrayEntry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    state: AdamW,
    m: Vec<ArrayEntry>,
    v: Vec<ArrayEntry>,
}

/// Model weights, optional optimizer moments, and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: MaeConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<AdamW>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &MaeModel, stage: Stage, epoch: usize) -> Self {
        Checkpoint {
            stage,
            epoch,
            config: model.config.clone(),
            params: model
                .store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_optimizer(mut self, optimizer: &AdamW) -> Self {
        self.optimizer = Some(optimizer.clone());
        self
    }

    pub fn model(&self) -> Result<MaeModel> {
        MaeModel::with_params(self.config.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, shape: &[usize], values: &[f64]| {
            let e = ArrayEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset: data.len(),
            };
            data.extend_from_slice(values);
            e
        };
        let params = self.params.iter().map(|(n, s, v)| push(n, s, v)).collect();
        let optimizer = match &self.optimizer {
            Some(opt) => {
                if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                let m = self
                    .params
                    .iter()
                    .zip(&opt.m)
                    .map(|((n, s, _), m)| push(n, s, m))
                    .collect();
                let v = self
                    .params
                    .iter()
                    .zip(&opt.v)
                    .map(|((n, s, _), v)| push(n, s, v))
                    .collect();
                Some(OptimizerHeader {
                    state: opt.clone(),
                    m,
                    v,
                })
            }
            None => None,
        };
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            seed: self.config.seed,
            config: self.config.clone(),
            params,
            optimizer,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let read = |e: &ArrayEntry| -> Result<Vec<f64>> {
            let len: usize = e.shape.iter().product();
            data.get(e.offset..e.offset + len)
                .map(|s| s.to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the end of the file", e.name)))
        };
        let params = header
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), e.shape.clone(), read(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut opt = h.state;
                opt.m = h.m.iter().map(read).collect::<Result<_>>()?;
                opt.v = h.v.iter().map(read).collect::<Result<_>>()?;
                Some(opt)
            }
            None => None,
        };
        Ok(Checkpoint {
            stage: header.stage,
            epoch: header.epoch,
            config: header.config,
            params,
            optimizer,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
