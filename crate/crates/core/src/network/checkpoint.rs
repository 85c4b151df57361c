//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "HDIDCKPT"
//! version  u32      1
//! meta     u32 length + UTF-8 JSON {network, train_seed, epoch}
//! count    u32      number of arrays
//! array*   u32 name length, name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, NetworkSpec, Param};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDIDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkSpec,
    pub train_seed: u64,
    pub epoch: usize,
}

pub fn encode(model: &ModelState, train_seed: u64, epoch: usize) -> Vec<u8> {
    let meta = CheckpointMeta {
        network: model.spec.clone(),
        train_seed,
        epoch,
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelState, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format("checkpoint", format!("meta: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "array name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "array too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    let model = ModelState {
        spec: meta.network.clone(),
        params,
    };
    // Shape check against the spec the checkpoint claims to hold.
    super::layout_for(&model).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if !model.all_finite() {
        return Err(Error::format("checkpoint", "non-finite parameter"));
    }
    Ok((model, meta))
}

/// Writes through a temporary file and a rename, so readers never observe a
/// partial checkpoint.
pub fn save(path: &Path, model: &ModelState, train_seed: u64, epoch: usize) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, encode(model, train_seed, epoch)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
