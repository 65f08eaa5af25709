//! Named parameter collections and the `HDRW` on-disk container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "HDRW"  u32 version (=1)  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 ndim, ndim × u32 dims,
//!             product(dims) × f32 payload (row-major)
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HDRW_MAGIC: &[u8; 4] = b"HDRW";
pub const HDRW_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order and is preserved by the container format.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T> {
    entries: IndexMap<String, Tensor<T>>,
    pub format_version: u32,
}

impl<T: Scalar> Default for WeightStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            entries: IndexMap::new(),
            format_version: HDRW_VERSION,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Weights(format!("invalid parameter name {name:?}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Weights(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing entry, keeping its position and requiring identical dims.
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))?;
        if slot.dims() != tensor.dims() {
            return Err(Error::Weights(format!(
                "{name}: dims {:?} cannot replace {:?}",
                tensor.dims(),
                slot.dims()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Store with the same names and dims, every value zero.
    pub fn zeros_like(&self) -> Self {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims().to_vec())))
                .collect(),
            format_version: self.format_version,
        }
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            format_version: self.format_version,
        }
    }

    /// Copies entries into `self` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &WeightStore<T>) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone())?;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> WeightStore<T> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
            format_version: self.format_version,
        }
    }

    /// Records every entry on `tape` as a leaf.
    pub fn to_tape(&self, tape: &Tape<T>, requires_grad: bool) -> TapeParams {
        TapeParams {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(HDRW_MAGIC);
        buf.extend_from_slice(&self.format_version.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.dims().len() as u8);
            for &d in t.dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != HDRW_MAGIC {
            return Err(Error::format(path, "bad HDRW magic"));
        }
        let version = r.u32()?;
        if version != HDRW_VERSION {
            return Err(Error::format(path, format!("unsupported HDRW version {version}")));
        }
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::format(path, format!("{name}: invalid dims {dims:?}")));
            }
            let bytes_needed = dims
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(path, format!("{name}: tensor too large")))?;
            let payload = r.take(bytes_needed)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))?;
            store
                .insert(name, t)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated HDRW container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

/// Tape handles for every parameter of a [`WeightStore`].
#[derive(Clone, Debug)]
pub struct TapeParams {
    vars: IndexMap<String, Var>,
}

impl TapeParams {
    /// Wraps existing tape variables under parameter names.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        TapeParams {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients accumulated on `tape`, as a store (zeros where unreached).
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> WeightStore<T> {
        let mut out = WeightStore::new();
        for (k, v) in &self.vars {
            let g = tape
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.dims(*v)));
            out.insert(k.clone(), g).expect("unique names");
        }
        out
    }
}
