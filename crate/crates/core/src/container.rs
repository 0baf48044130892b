//! Versioned binary container for named tensors plus JSON metadata.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, UTF-8
//! JSON header, then each tensor's values as little-endian `f64` in header
//! order. Values are stored bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use bitstain_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BSTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
        self.meta.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>> {
        self.meta
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Config(format!("metadata `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn require_meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .ok_or_else(|| Error::State(format!("container has no `{key}` entry")))
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("container has no tensor `{name}`")))
    }

    /// Stores every parameter under `prefix/name`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for (name, t) in params.iter() {
            self.put_tensor(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `params` from `prefix/name` entries.
    pub fn load_params(&self, prefix: &str, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor(&format!("{prefix}/{name}"))?;
            params.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let payload: usize = self.tensors.values().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("corrupt container: {m}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "container format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(u64b) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&r[..hlen]).map_err(|e| bad(&e.to_string()))?;
        r = &r[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(bad(&format!("tensor `{}` truncated", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = Container::new();
        c.put_meta("step", &17u64).unwrap();
        c.put_meta("alpha", &0.1f64).unwrap();
        c.put_tensor("a/w", Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.put_tensor("b", Tensor::scalar(std::f64::consts::PI));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("a/w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.meta::<f64>("alpha").unwrap(), Some(0.1));
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut bytes = Container::new().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }
}
