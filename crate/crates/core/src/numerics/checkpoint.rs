//! `DPDM` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPDM" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 dtype | u8 rank
//!            | rank x u32 dims | row-major payload
//! ```
//!
//! dtype 0 is IEEE-754 binary32. dtype 1 is raw bytes (rank 1), used for the
//! `__arch__` text block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::ParameterSet;
use crate::numerics::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DPDM";
pub const VERSION: u32 = 1;
pub const ARCH_ENTRY: &str = "__arch__";

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

/// Named entries, written in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores every parameter as `{prefix}{name}` in 32-bit precision.
    pub fn put_params<T: Real>(&mut self, prefix: &str, params: &ParameterSet<T>) {
        for (name, t) in params.iter() {
            self.entries
                .insert(format!("{prefix}{name}"), Entry::F32(t.cast()));
        }
    }

    /// Collects every tensor entry named `{prefix}*`, with the prefix stripped.
    pub fn params<T: Real>(&self, prefix: &str) -> Result<ParameterSet<T>> {
        let mut out = ParameterSet::new();
        for (name, e) in &self.entries {
            if let (Some(rest), Entry::F32(t)) = (name.strip_prefix(prefix), e) {
                if name != ARCH_ENTRY {
                    out.insert(rest, t.cast())?;
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Format(format!("no parameters with prefix `{prefix}`")));
        }
        Ok(out)
    }

    pub fn set_arch(&mut self, text: &str) {
        self.entries
            .insert(ARCH_ENTRY.to_string(), Entry::Bytes(text.as_bytes().to_vec()));
    }

    pub fn arch(&self) -> Result<String> {
        match self.entries.get(ARCH_ENTRY) {
            Some(Entry::Bytes(b)) => String::from_utf8(b.clone())
                .map_err(|_| Error::Format("architecture block is not UTF-8".into())),
            _ => Err(Error::Format("missing architecture block".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(too_large)?.to_le_bytes());
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(too_large)?.to_le_bytes());
            out.extend_from_slice(nb);
            match entry {
                Entry::F32(t) => {
                    out.push(DTYPE_F32);
                    out.push(u8::try_from(t.rank()).map_err(too_large)?);
                    for &d in t.shape() {
                        out.extend_from_slice(&u32::try_from(d).map_err(too_large)?.to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&u32::try_from(b.len()).map_err(too_large)?.to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let entry = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| too_large(()))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Entry::F32(Tensor::new(dims, data)?)
                }
                DTYPE_BYTES => Entry::Bytes(r.take(n)?.to_vec()),
                other => return Err(Error::Format(format!("unknown dtype code {other}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_large<E>(_: E) -> Error {
    Error::Format("value too large for checkpoint field".into())
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
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
