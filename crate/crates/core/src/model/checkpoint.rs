//! Versioned checkpoint file: magic, format version, JSON header, then raw
//! little-endian f64 parameter blocks in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Dims, Params};
use super::train::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RLVCKPT\0";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub corpus_version: String,
    pub corpus_size: usize,
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u64,
    pub dims: Dims,
    pub params: Params,
    pub coarse_thresholds: [f64; 3],
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    dims: Dims,
    coarse_thresholds: [f64; 3],
    meta: TrainingMeta,
    blocks: Vec<(String, usize)>,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: self.version,
            dims: self.dims,
            coarse_thresholds: self.coarse_thresholds,
            meta: self.meta.clone(),
            blocks: self.params.blocks().iter().map(|(n, b)| (n.to_string(), b.len())).collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + h.len() + self.params.n_params() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, b) in self.params.blocks() {
            for x in b {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let format = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if format != FORMAT {
            return Err(bad(&format!("unsupported format {format}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut params = Params::zeros(&header.dims);
        let mut off = 20 + hlen;
        for ((name, len), (expect, block)) in header.blocks.iter().zip(params.blocks_mut()) {
            if name != expect || *len != block.len() {
                return Err(bad(&format!("block {name} does not match dims")));
            }
            let raw = bytes.get(off..off + len * 8).ok_or_else(|| bad("truncated parameters"))?;
            for (i, c) in raw.chunks_exact(8).enumerate() {
                block[i] = f64::from_le_bytes(c.try_into().unwrap());
            }
            off += len * 8;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if !params.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self { version: header.version, dims: header.dims, params, coarse_thresholds: header.coarse_thresholds, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
