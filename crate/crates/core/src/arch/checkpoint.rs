//! Binary checkpoint container.
//!
//! ```text
//! "ANCK"  u32 version  u32 len + config JSON
//! u32 record count
//! per record: u32 len + name (UTF-8), u8 dtype tag, u32 ndim,
//!             ndim × u64 extents, values little-endian
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::ndmath::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ANCK";
pub const VERSION: u32 = 1;

/// Decoded container: configuration plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub records: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        let i = self.records.iter().position(|(n, _)| n == name)?;
        Some(self.records.remove(i).1)
    }

    /// Removes and returns every record whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut keep = Vec::new();
        for (n, t) in self.records.drain(..) {
            match n.strip_prefix(prefix) {
                Some(rest) => out.push((rest.to_string(), t)),
                None => keep.push((n, t)),
            }
        }
        self.records = keep;
        out
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} too long for the container")))
}

pub fn encode<T: Real>(config: &ModelConfig, records: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&config.materialized())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(json.len(), "config")?.to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&u32_len(records.len(), "record list")?.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&u32_len(name.len(), "name")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&u32_len(t.ndim(), "shape")?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated checkpoint reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let json = std::str::from_utf8(r.bytes(n, "config")?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config: ModelConfig = serde_json::from_str(json)?;
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(n, "name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let tag = r.bytes(1, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} in `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "record `{name}` stores {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let w = dtype.width();
        let raw = r.bytes(len.saturating_mul(w), "values")?;
        let data = raw.chunks_exact(w).map(T::read_le).collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after records", buf.len() - r.pos)));
    }
    Ok(Checkpoint { config, records })
}

/// Records for a model: one per parameter, by name.
pub fn model_records<T: Real>(model: &Model<T>) -> Vec<(String, &Tensor<T>)> {
    model
        .params()
        .iter()
        .map(|p| (p.spec.name.clone(), &p.value))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl<T: Real> Model<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(self.config(), &model_records(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    /// Loads a model, ignoring any non-parameter records (such as
    /// optimizer moments).
    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_file::<T>(path)?;
        Self::from_checkpoint(ck).map(|(m, _)| m)
    }

    /// Splits a checkpoint into the model and leftover records.
    pub fn from_checkpoint(mut ck: Checkpoint<T>) -> Result<(Self, Checkpoint<T>)> {
        let (specs, _) = super::params::param_specs(&ck.config.materialized());
        let mut named = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = ck
                .take(&s.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", s.name)))?;
            named.push((s.name.clone(), t));
        }
        let model = Model::from_named(&ck.config, named)?;
        Ok((model, ck))
    }
}
