//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SODM"  u32 version  u32 entry_count
//! entry*: u32 name_len  name (UTF-8)  u8 dtype  u32 n  u32 c  u32 h  u32 w  values
//! ```
//!
//! Values are raw little-endian floats of the entry's dtype.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModuleParams;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 4] = b"SODM";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    entries: Vec<(String, Tensor4<T>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(corrupt(format!("duplicate entry {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor4<T>)] {
        &self.entries
    }

    pub fn from_params(params: &ModuleParams<T>) -> Self {
        Checkpoint {
            entries: params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.tensor.clone()))
                .collect(),
        }
    }

    /// Copies every entry named in `params` out of the checkpoint. Entries
    /// whose names start with one of `skip_prefixes` are ignored; any other
    /// entry unknown to `params` is an error, as is a missing one.
    pub fn restore_params(&self, params: &mut ModuleParams<T>, skip_prefixes: &[&str]) -> Result<()> {
        for (name, tensor) in &self.entries {
            if skip_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            params.set(name, tensor.clone())?;
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        if let Some(missing) = names.iter().find(|n| self.get(n).is_none()) {
            return Err(corrupt(format!("checkpoint has no entry for parameter {missing}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            let d = t.dims();
            for v in [d.n, d.c, d.h, d.w] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("bad magic, not a SODM checkpoint"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let count = r.u32("entry count")?;
        let mut ckpt = Checkpoint::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| corrupt(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let code = r.take(1, "dtype")?[0];
            let dtype =
                DType::from_code(code).ok_or_else(|| corrupt(format!("entry {name}: unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(corrupt(format!("entry {name} is {dtype:?}, expected {:?}", T::DTYPE)));
            }
            let mut d = [0usize; 4];
            for v in &mut d {
                *v = r.u32("dims")? as usize;
            }
            let dims = Dims::new(d[0], d[1], d[2], d[3]);
            let raw = r.take(dims.len() * dtype.size(), "values")?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            ckpt.push(name, Tensor4::from_vec(dims, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
