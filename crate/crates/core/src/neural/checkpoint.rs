//! `cophy-ckpt/1` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "cophy-ckpt/1\n"
//! u32 metadata_len, metadata_len bytes of JSON (string -> string map)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, ndim x u64 dims, prod(dims) x f64
//! ```
//! Tensors are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use super::{NeuralError, Tensor};

pub const CKPT_SCHEMA: &str = "cophy-ckpt/1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NeuralError> {
        if self.buf.len() - self.pos < n {
            return Err(NeuralError::Checkpoint {
                offset: self.pos,
                detail: format!("truncated while reading {}", what),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_SCHEMA.as_bytes());
        out.push(b'\n');
        let meta = serde_json::to_vec(&self.metadata).expect("string map serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NeuralError> {
        let header_end = buf.iter().position(|b| *b == b'\n').ok_or(NeuralError::Checkpoint {
            offset: 0,
            detail: "missing schema line".into(),
        })?;
        let schema = String::from_utf8_lossy(&buf[..header_end]).to_string();
        if schema != CKPT_SCHEMA {
            return Err(NeuralError::Schema { found: schema, expected: CKPT_SCHEMA.into() });
        }
        let mut r = Reader { buf, pos: header_end + 1 };
        let meta_len = r.u32("metadata length")? as usize;
        let meta_start = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(meta_bytes).map_err(|e| {
            NeuralError::Checkpoint { offset: meta_start, detail: format!("metadata: {}", e) }
        })?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| NeuralError::Checkpoint { offset: at, detail: "name is not UTF-8".into() })?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or(NeuralError::Checkpoint {
                offset: r.pos,
                detail: "tensor size overflow".into(),
            })?, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(NeuralError::Checkpoint { offset: r.pos, detail: "trailing bytes".into() });
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
