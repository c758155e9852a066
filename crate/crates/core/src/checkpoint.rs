//! Single-file tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0, 8)          u64 L, byte length of the header
//! [8, 8 + L)      UTF-8 JSON header
//! [8 + L, EOF)    payload: tensors back to back, each row-major LE floats
//! ```
//!
//! The header is
//! `{"tensors": [{"name", "dtype": "f32"|"f64", "shape": [..], "offset", "len"}], "metadata": {..}}`
//! where `offset` is relative to the start of the payload and `len` is in
//! bytes. Tensors are written in lexicographic name order with no padding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint<T = f32> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: BTreeMap<String, String>,
}

/// Outcome of loading a checkpoint into a store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters the checkpoint did not provide; they keep their values.
    pub missing: Vec<String>,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            tensors: store.iter().map(|p| (p.id.clone(), p.value.clone())).collect(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header { tensors: entries, metadata: self.metadata.clone() })
            .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad("file shorter than the 8-byte header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            bad(format!("header length {hlen} exceeds file size {}", bytes.len()))
        })?;
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.dtype != T::DTYPE {
                return Err(bad(format!("`{}` has dtype {}, expected {}", e.name, e.dtype, T::DTYPE)));
            }
            let numel: usize = e.shape.iter().product();
            if e.len as usize != numel * T::BYTES {
                return Err(bad(format!("`{}`: {} bytes for shape {:?}", e.name, e.len, e.shape)));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > payload.len() {
                return Err(bad(format!("`{}` extends past end of payload", e.name)));
            }
            let data: Vec<T> = payload[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("`{}`: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Checkpoint { tensors, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies matching tensors into `store`. Every checkpoint tensor must name
    /// an existing parameter of the same shape; store parameters absent from
    /// the checkpoint are reported as missing and left untouched.
    pub fn apply_to(&self, store: &mut ParamStore<T>) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for (name, t) in &self.tensors {
            let p = store.get_mut(name)?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: checkpoint shape {:?} vs model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            report.loaded.push(name.clone());
        }
        report.missing = store.names().filter(|n| !self.tensors.contains_key(*n)).map(str::to_string).collect();
        Ok(report)
    }
}
