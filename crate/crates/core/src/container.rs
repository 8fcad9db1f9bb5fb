//! `CTIQ1` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CTIQ1"
//! u32 architecture-string length, UTF-8 architecture string
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 dtype (1 = f64), u8 rank, rank x u64 extents
//! payloads: f64 values of each tensor, in manifest order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CTIQ1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub architecture: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(architecture: &str, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(architecture.len() as u32).to_le_bytes());
    out.extend_from_slice(architecture.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|s| u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<WeightFile> {
    let err = |m: String| Error::format(path, m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(err("not a CTIQ1 weight container (bad magic)".into()));
    }
    let arch_len = r.u32().ok_or_else(|| err("truncated header".into()))? as usize;
    let architecture = r
        .take(arch_len)
        .and_then(|s| std::str::from_utf8(s).ok())
        .ok_or_else(|| err("truncated or invalid architecture string".into()))?
        .to_string();
    let count = r.u32().ok_or_else(|| err("truncated header".into()))? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let entry = |m: &str| err(format!("manifest entry {i}: {m}"));
        let name_len = r.u16().ok_or_else(|| entry("truncated"))? as usize;
        let name = r
            .take(name_len)
            .and_then(|s| std::str::from_utf8(s).ok())
            .ok_or_else(|| entry("truncated or invalid name"))?
            .to_string();
        let entry = |m: String| err(format!("manifest entry {i} ({name}): {m}"));
        let dtype = r.u8().ok_or_else(|| entry("truncated".into()))?;
        if dtype != DTYPE_F64 {
            return Err(entry(format!("unsupported dtype code {dtype}")));
        }
        let rank = r.u8().ok_or_else(|| entry("truncated".into()))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64().ok_or_else(|| entry("truncated shape".into()))?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(entry(format!("invalid extent {d}")));
            }
            shape.push(d as usize);
        }
        manifest.push((name, shape));
    }
    let mut payload_len = 0usize;
    for (name, shape) in &manifest {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| err(format!("manifest entry {name}: size overflow")))?;
        payload_len += n;
    }
    let expected = r.pos + payload_len;
    if bytes.len() != expected {
        return Err(err(format!(
            "payload length mismatch: expected {expected} bytes in total, found {}",
            bytes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8).expect("length validated");
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| err(format!("manifest entry {name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(WeightFile {
        architecture,
        tensors,
    })
}

pub fn save(path: &Path, architecture: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(architecture, tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<WeightFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
