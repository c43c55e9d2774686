//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "STKCKPT\0"
//! version    u32      currently 1
//! header_len u64
//! header     JSON     {"step": u64, "params": [{"name", "shape"}], "meta": any}
//! adam       3 x f64  beta1, beta2, eps
//! per param  value[n], m[n], v[n] as f64
//! ```
//!
//! Floats are stored as raw bits, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{AdamConfig, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STKCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

pub fn write_checkpoint(mut w: impl Write, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        step: store.step,
        params: store
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for v in [store.adam.beta1, store.adam.beta2, store.adam.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in &store.params {
        for block in [p.value.data(), &p.m, &p.v] {
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;

    let adam = read_f64s(&mut r, 3)?;
    let mut store = ParamStore::new();
    store.adam = AdamConfig {
        beta1: adam[0],
        beta2: adam[1],
        eps: adam[2],
    };
    store.step = header.step;
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let value = read_f64s(&mut r, n)?;
        let m = read_f64s(&mut r, n)?;
        let v = read_f64s(&mut r, n)?;
        if store.id(&entry.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", entry.name)));
        }
        let id = store.add(entry.name, Tensor::new(entry.shape, value)?);
        let p = &mut store.params[id.index()];
        p.m = m;
        p.v = v;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), store, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}
