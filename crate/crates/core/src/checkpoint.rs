//! Model checkpoints: a JSON header followed by `MDT1` tensor records.
//!
//! Layout: magic `MDC1`, u64 little-endian header length, UTF-8 JSON header
//! `{"kind", "meta", "tensors": [names]}`, then one `MDT1` record per name in
//! header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDC1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<String>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: Value, tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            t.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(Error::file(path))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated checkpoint"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected MDC1"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::format(path, "truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for name in header.tensors {
            tensors.push((name, Tensor::read_from(&mut r, path)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format(
                path,
                format!("checkpoint kind `{}`, expected `{kind}`", self.kind),
            ));
        }
        Ok(self)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }
}
