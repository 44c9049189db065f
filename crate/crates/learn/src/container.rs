//! Versioned binary container for network weights.
//!
//! ```text
//! magic "WBNET\0\0\0" | u32 format version | u32 kind
//! u64 header length | header (JSON)
//! u32 tensor count | per tensor:
//!     u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 rank | u64 dims… | little-endian values
//! ```

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io, LearnError, Result};

const MAGIC: &[u8; 8] = b"WBNET\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ContainerKind {
    Classifier = 1,
    GanBundle = 2,
}

pub struct Container {
    pub kind: ContainerKind,
    pub header: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

impl Container {
    pub fn header_as<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.header.clone()).map_err(|e| format_err(path, format!("bad header: {e}")))
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn take_prefixed(&mut self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self.tensors.keys().filter(|k| k.starts_with(&p)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let t = self.tensors.remove(&k).expect("key listed");
                (k[p.len()..].to_string(), t)
            })
            .collect()
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> LearnError {
    LearnError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode(kind: ContainerKind, header: &impl Serialize, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(workbench_core::Error::from)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => out.push(1),
            _ => out.push(0),
        }
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn write(path: &Path, kind: ContainerKind, header: &impl Serialize, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(kind, header, tensors)?;
    workbench_core::manifest::write_atomic(path, &bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, "truncated container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| format_err(self.path, "length overflow"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(format_err(path, "not a workbench weight container"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported container version {version}")));
    }
    let kind = match r.u32()? {
        1 => ContainerKind::Classifier,
        2 => ContainerKind::GanBundle,
        k => return Err(format_err(path, format!("unknown container kind {k}"))),
    };
    let header_len = r.u64().and_then(|v| r.len(v))?;
    let header = serde_json::from_slice(r.take(header_len)?).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let count = r.u32()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64()?;
            dims.push(r.len(d)?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| format_err(path, "tensor too large"))?;
        let t = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err(path, "tensor too large"))?)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err(path, "tensor too large"))?)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            d => return Err(format_err(path, format!("unknown dtype tag {d}"))),
        };
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format_err(path, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after tensors"));
    }
    Ok(Container { kind, header, tensors })
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    decode(&bytes, path)
}
