//! Versioned binary checkpoints: fixed magic, a JSON architecture
//! descriptor, then named little-endian 64-bit-real parameter blobs in
//! registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"IRIB";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ArchDescriptor {
    ResidualNet { arch: super::NetArch },
    PriorScore { arch: super::NetArch, alphas_bar: Vec<f64> },
}

pub fn save(path: &Path, arch: &ArchDescriptor, params: &ParamStore) -> Result<()> {
    let arch_json = serde_json::to_vec(arch)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&arch_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ArchDescriptor, ParamStore)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchDescriptor = serde_json::from_slice(r.take(arch_len)?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::Checkpoint("parameter blob too large".into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        params.register(name, Tensor::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter table".into()));
    }
    Ok((arch, params))
}
