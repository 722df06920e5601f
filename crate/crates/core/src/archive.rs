//! Single-file binary container shared by encoder weights, context
//! checkpoints and feature datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64            header length H in bytes
//! H bytes        UTF-8 JSON header
//! payload        concatenated entry blocks (f32 or u32, little-endian)
//! ```
//!
//! The header is
//! `{"format":"ctxopt","version":1,"kind":..,"meta":{..},"entries":[{"name","dtype","shape","offset","sha256"}]}`
//! where `offset` is the byte offset of the block inside the payload and
//! `sha256` is the hex digest of that block's bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "ctxopt";
const VERSION: u32 = 1;
/// Upper bound on the JSON header, to reject garbage length prefixes early.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::U32(_) => "u32",
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            BlobData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            BlobData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.blobs.push(Blob {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: BlobData::F32(t.data().to_vec()),
        });
    }

    pub fn push_u32(&mut self, name: &str, values: Vec<u32>) {
        self.blobs.push(Blob {
            name: name.to_string(),
            shape: vec![values.len()],
            data: BlobData::U32(values),
        });
    }

    fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("{} archive is missing entry '{name}'", self.kind)))
    }

    /// Frozen tensor for an `f32` entry.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.blob(name)? {
            Blob { shape, data: BlobData::F32(v), .. } => Tensor::new(shape.clone(), v.clone()),
            _ => Err(Error::Format(format!("entry '{name}' is not f32"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.blob(name)? {
            Blob { data: BlobData::U32(v), .. } => Ok(v),
            _ => Err(Error::Format(format!("entry '{name}' is not u32"))),
        }
    }

    /// Hex SHA-256 of one entry's little-endian bytes.
    pub fn checksum(&self, name: &str) -> Result<String> {
        Ok(sha256_hex(&self.blob(name)?.data.to_le_bytes()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.blobs.len());
        for b in &self.blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::dim("archive entry", &b.shape, &[b.data.len()]));
            }
            let bytes = b.data.to_le_bytes();
            entries.push(Entry {
                name: b.name.clone(),
                dtype: b.data.dtype().to_string(),
                shape: b.shape.clone(),
                offset: payload.len() as u64,
                sha256: sha256_hex(&bytes),
            });
            payload.extend(bytes);
        }
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |msg: String| Error::Format(msg);
        if bytes.len() < 8 {
            return Err(fmt("file too short for a header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if hlen > MAX_HEADER || 8 + hlen > bytes.len() as u64 {
            return Err(fmt(format!("header length {hlen} exceeds file size")));
        }
        let header_end = 8 + hlen as usize;
        let header: Header =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| fmt(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(fmt(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let payload = &bytes[header_end..];
        let mut expected_offset = 0u64;
        let mut blobs = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + numel * 4;
            if e.offset != expected_offset || end > payload.len() {
                return Err(fmt(format!("entry '{}' lies outside the payload", e.name)));
            }
            let block = &payload[start..end];
            if sha256_hex(block) != e.sha256 {
                return Err(fmt(format!("checksum mismatch for entry '{}'", e.name)));
            }
            let words = block.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
            let data = match e.dtype.as_str() {
                "f32" => BlobData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => BlobData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(fmt(format!("unknown dtype '{other}'"))),
            };
            expected_offset = end as u64;
            blobs.push(Blob {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if expected_offset != payload.len() as u64 {
            return Err(fmt("trailing bytes after the last entry".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            blobs,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
