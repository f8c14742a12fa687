//! Named-tensor container.
//!
//! Byte layout:
//!
//! ```text
//! [0..8)        magic  b"VFTENSR1"
//! [8..16)       u64 LE header length H
//! [16..16+H)    UTF-8 JSON header
//! [16+H..)      tensor data, f64 little-endian, concatenated
//! ```
//!
//! The header is `{"tensors": [{"name", "shape", "offset"}], "meta": any}`
//! where `offset` is the byte offset of the tensor inside the data section.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"VFTENSR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0u64;
    let tensors = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: ckpt.meta.clone(),
    })
    .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in &ckpt.tensors {
        let mut buf = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = data
            .get(start..start + 8 * n)
            .ok_or_else(|| TensorError::Checkpoint(format!("{} runs past end of data", e.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, values)?));
    }
    Ok(Checkpoint {
        tensors,
        meta: header.meta,
    })
}
