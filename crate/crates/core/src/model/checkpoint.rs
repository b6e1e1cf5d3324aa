//! Binary checkpoint format.
//!
//! ```text
//! header   "SINREQCK" | version: u32 LE | record count: u32 LE
//! record   name length: u32 LE | name bytes (UTF-8) | dtype: u8 (1 = f64)
//!          | rank: u32 LE | dims: u32 LE x rank | data: f64 LE x product(dims)
//! ```
//!
//! One record per parameter tensor, named `<layer>.weight` / `<layer>.bias`,
//! in model layer order.

use std::path::Path;

use indexmap::IndexMap;

use super::{LayerParams, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SINREQCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions overflow")))?;
        let raw = r.take(n.saturating_mul(8), "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

impl Model {
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), p.weight.clone()),
                    (format!("{name}.bias"), p.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode(&self.checkpoint_records())
    }

    pub fn from_checkpoint(spec: ModelSpec, bytes: &[u8]) -> Result<Model> {
        let mut records: IndexMap<String, Tensor> = decode(bytes)?.into_iter().collect();
        let mut params = IndexMap::new();
        for layer in spec.trainable() {
            let mut take = |suffix: &str| {
                let key = format!("{}.{suffix}", layer.name);
                records
                    .shift_remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))
            };
            let weight = take("weight")?;
            let bias = take("bias")?;
            params.insert(layer.name.clone(), LayerParams { weight, bias });
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected record {extra}")));
        }
        Model::from_params(spec, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(spec: ModelSpec, path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint(spec, &bytes)
    }
}
