//! `RADF` flat binary tensor records.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RADF"  version:u32  count:u32
//! repeated count times:
//!     name_len:u32  name:[u8; name_len] (UTF-8)
//!     rank:u32      extents:[u64; rank]
//!     data:[f32; product(extents)]
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RADF";
pub const VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn from_tensor<E: Scalar>(name: impl Into<String>, t: &Tensor<E>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<E: Scalar>(&self) -> Result<Tensor<E>> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|r| 8 + r.name.len() + 8 * r.shape.len() + 4 * r.data.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Decode {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Decode {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = core::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Decode {
                offset: start + 4,
                reason: "name is not UTF-8".into(),
            })?
            .into();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u64("extent")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::Decode {
                offset: r.pos,
                reason: "extent product overflows".into(),
            })?;
            shape.push(d);
        }
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(records)
}

/// Records for every parameter of `store`, names prefixed with `prefix`.
pub fn store_records<E: Scalar>(store: &ParamStore<E>, prefix: &str) -> Vec<Record> {
    store
        .iter()
        .map(|(name, t)| Record::from_tensor(format!("{prefix}{name}"), t))
        .collect()
}

/// Overwrite the values of `store` from records named `prefix + name`.
/// Fails unless every parameter is present with a matching shape.
pub fn load_store<E: Scalar>(store: &mut ParamStore<E>, prefix: &str, records: &[Record]) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let key = format!("{prefix}{}", store.name(id));
        let rec = records
            .iter()
            .find(|r| r.name == key)
            .ok_or_else(|| Error::Architecture(format!("checkpoint lacks {key}")))?;
        if rec.shape != store.value(id).shape() {
            return Err(Error::Architecture(format!(
                "{key}: checkpoint shape {:?}, model shape {:?}",
                rec.shape,
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = rec.to_tensor()?;
    }
    Ok(())
}
