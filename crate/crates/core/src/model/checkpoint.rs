//! Binary checkpoint: `MLCK` magic, a length-prefixed JSON header, then one
//! record per parameter `{u32 name_len, name, u32 rank, u32 dims…, f32 data}`,
//! all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MLCK";

/// Everything besides the weights needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub model: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Weights are stored as `f32`; reloaded values are the widened `f32`s.
pub fn encode(header: &CheckpointHeader, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.source, format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint into its header and a parameter list in file order.
pub fn decode(bytes: &[u8], source: &str) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4)? != MAGIC {
        return Err(Error::format(source, "not a checkpoint (bad magic)"));
    }
    let hlen = r.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::format(source, format!("header: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format(source, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(source, format!("{name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(source, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

/// Overwrites `store` with checkpoint values, requiring identical names and shapes.
pub fn apply(store: &mut ParamStore, params: Vec<(String, Tensor)>, source: &str) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::format(
            source,
            format!("{} parameters in file, model has {}", params.len(), store.len()),
        ));
    }
    for (dst, (name, value)) in store.iter_mut().zip(params) {
        if dst.name != name || dst.value.shape() != value.shape() {
            return Err(Error::format(
                source,
                format!("parameter {name} {:?} does not match model's {} {:?}", value.shape(), dst.name, dst.value.shape()),
            ));
        }
        dst.value = value;
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, header: &CheckpointHeader, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(header, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
