//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `MAGIC`, `u32` version, `u64` header length, header JSON (model config and
//! init seed), `u64` parameter count, then per parameter: `u32` name length,
//! name, `u8` trainable flag, `u32` rank, `u64` dims, `f64` values. The file
//! ends with the 32-byte SHA-256 of the frozen set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BiChannelModel, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BICOPCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    /// Digest of the experiment configuration that produced the weights.
    #[serde(default)]
    config_digest: String,
}

pub fn encode(model: &BiChannelModel) -> Result<Vec<u8>> {
    encode_with_digest(model, "")
}

pub fn encode_with_digest(model: &BiChannelModel, config_digest: &str) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        seed: model.seed(),
        config_digest: config_digest.into(),
    })?;
    let store = model.store();
    let mut buf = Vec::with_capacity(store.n_total() * 8 + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(u8::from(t.requires_grad()));
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&hex::decode(store.frozen_checksum()).expect("hex digest"));
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(self.path, "length overflow"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<BiChannelModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hlen = r.u64()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let count = r.u64()?;
    let mut values = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::format(path, "name is not utf-8"))?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(path, format!("bad trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "length overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((name, Tensor::new(shape, data)?, trainable));
    }
    let digest = hex::encode(r.take(32)?);
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    let model = BiChannelModel::from_parts(header.config, header.seed, values)?;
    if model.store().frozen_checksum() != digest {
        return Err(Error::format(path, "frozen-set checksum mismatch"));
    }
    Ok(model)
}

/// Writes through a temporary sibling and renames it into place.
pub fn save(model: &BiChannelModel, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    crate::io_util::write_atomic(path, &bytes)
}

pub fn save_with_digest(model: &BiChannelModel, path: &Path, config_digest: &str) -> Result<()> {
    crate::io_util::write_atomic(path, &encode_with_digest(model, config_digest)?)
}

pub fn load(path: &Path) -> Result<BiChannelModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Frozen-set checksum stored in a checkpoint file, read without rebuilding
/// the model.
pub fn stored_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    Ok(hex::encode(&bytes[bytes.len() - 32..]))
}
