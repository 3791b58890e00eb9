//! Versioned binary container for named fp32 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"EMJK"
//! version    u32 (= 1)
//! kind       u32 length + UTF-8           e.g. "vq_codec", "lm", "segmentation"
//! metadata   u32 length + UTF-8 JSON      model config and training bookkeeping
//! tensors    u32 count, then per tensor:
//!              name  u32 length + UTF-8
//!              ndim  u32, dims u64 x ndim
//!              data  f32 x prod(dims)
//! blobs      u32 count, then per blob:
//!              name  u32 length + UTF-8
//!              data  u64 length + bytes   (e.g. "optimizer_state")
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

const MAGIC: &[u8; 4] = b"EMJK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: ParamSet<f32>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        metadata: serde_json::Value,
        tensors: ParamSet<f32>,
    ) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors,
            blobs: Vec::new(),
        }
    }

    pub fn with_blob(mut self, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.blobs.push((name.into(), bytes));
        self
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.metadata)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, b) in &self.blobs {
            put_str(&mut out, name);
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint version {version}"
            )));
        }
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?)?;
        let n = r.u32()? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Decode("tensor too large".into()))?,
            )?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Decode(e.to_string()))?;
            tensors.insert(name, t);
        }
        let nb = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(nb);
        for _ in 0..nb {
            let name = r.string()?;
            let len = r.u64()? as usize;
            blobs.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            kind,
            metadata,
            tensors,
            blobs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write-then-rename so readers never observe a partial file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the `kind` tag.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                ck.kind
            )));
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content id of a checkpoint file (first 12 hex digits of its SHA-256).
pub fn file_id(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes)[..12].to_string())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Decode("truncated checkpoint".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Decode(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut p = ParamSet::new();
        p.insert(
            "a.weight",
            ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f32 - 2.5),
        );
        p.insert("scalar", ArrayD::from_elem(IxDyn(&[]), 7.0));
        let ck = Checkpoint::new("lm", serde_json::json!({"layers": 2}), p)
            .with_blob("opt", vec![1, 2, 3]);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        Checkpoint::new("lm", serde_json::Value::Null, ParamSet::new())
            .save(&p)
            .unwrap();
        assert!(Checkpoint::load_kind(&p, "lm").is_ok());
        assert!(matches!(
            Checkpoint::load_kind(&p, "vq_codec"),
            Err(Error::Config(_))
        ));
    }
}
