//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!   "FBCK", version byte 1,
//!   u32 entry count,
//!   per entry: u16 name length, name bytes, u8 rank, u32 per extent,
//!              f32 per element,
//!   u32 metadata length, metadata bytes (UTF-8 JSON).
//!
//! Parameter data is stored as f32 regardless of the in-memory precision,
//! so saving from a 64-bit checkpoint quantizes. Saving and re-loading a
//! 32-bit checkpoint is bitwise lossless.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, NetworkConfig};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: NetworkConfig,
    iterations: u64,
    seed: u64,
}

pub fn save<E: Scalar>(ckpt: &Checkpoint<E>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);

    let handles = ckpt.handles();
    buf.extend_from_slice(&(handles.len() as u32).to_le_bytes());
    for (name, t) in &handles {
        if name.len() > u16::MAX as usize {
            return Err(Error::internal(format!("parameter name too long: {name}")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }

    let meta = Meta { config: ckpt.config.clone(), iterations: ckpt.iterations, seed: ckpt.seed };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| Error::internal(format!("metadata serialization failed: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());

    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load<E: Scalar>(path: &Path) -> Result<Checkpoint<E>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };

    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }

    let count = cur.u32("entry count")? as usize;
    let mut tensors: IndexMap<String, Tensor<E>> = IndexMap::new();
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(path, format!("entry {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(path, format!("entry {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::format(path, format!("entry {name} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, "tensor data")?;
        let data: Vec<E> = raw
            .chunks_exact(4)
            .map(|c| E::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(data, &shape)?).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name}")));
        }
    }

    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    if cur.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after metadata"));
    }
    let meta_str = std::str::from_utf8(meta_bytes)
        .map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    let meta: Meta = serde_json::from_str(meta_str)
        .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;

    Checkpoint::from_parts(meta.config, tensors, meta.iterations, meta.seed)
        .map_err(|e| Error::format(path, format!("inconsistent checkpoint: {e}")))
}
