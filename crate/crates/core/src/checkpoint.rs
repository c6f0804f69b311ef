//! Binary checkpoint serialization.
//!
//! Layout: magic "TCKP", version u32, entry count u32, then per entry a
//! length-prefixed UTF-8 name, u32 rank, u32 extents, and the tensor body as
//! little-endian 32-bit floats. Everything little-endian. Writing a store and
//! reading it back reproduces the bytes exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCKP";
pub const VERSION: u32 = 1;

pub fn save<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn to_bytes<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let entries = store.checkpoint_entries();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32c().to_le_bytes());
        }
    }
    out
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    from_bytes(&fs::read(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_off = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format { offset: name_off as u64, msg: "name not UTF-8".into() })?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("extent")? as usize);
        }
        let numel: usize = dims.iter().product();
        let body_off = r.pos;
        let body = r.take(numel * 4, "tensor body")?;
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| Error::Format {
            offset: body_off as u64,
            msg: format!("entry {name:?}: {e}"),
        })?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

/// Installs checkpoint entries into an already-built store. Every entry must
/// name an existing parameter or buffer of identical shape, and every
/// parameter and buffer must be covered; all offenders are reported at once.
pub fn apply<S: Scalar>(entries: &[(String, Tensor<f32>)], store: &mut ParamStore<S>) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in entries {
        if !seen.insert(name.clone()) {
            problems.push(format!("{name}: duplicated in checkpoint"));
            continue;
        }
        if store.has(name) {
            let want = store.value(name)?.dims().to_vec();
            if want != t.dims() {
                problems.push(format!("{name}: checkpoint {:?}, model {want:?}", t.dims()));
            }
        } else if store.has_buffer(name) {
            let want = store.buffer(name)?.dims().to_vec();
            if want != t.dims() {
                problems.push(format!("{name}: checkpoint {:?}, model {want:?}", t.dims()));
            }
        } else {
            problems.push(format!("{name}: not in model"));
        }
    }
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        if !seen.contains(&name) {
            problems.push(format!("{name}: missing from checkpoint"));
        }
    }
    for name in store.buffer_names().map(str::to_string).collect::<Vec<_>>() {
        if !seen.contains(&name) {
            problems.push(format!("{name}: missing from checkpoint"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    for (name, t) in entries {
        let cast = t.cast::<S>();
        if store.has(name) {
            store.set_value(name, cast)?;
        } else {
            store.set_buffer(name, cast)?;
        }
    }
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
