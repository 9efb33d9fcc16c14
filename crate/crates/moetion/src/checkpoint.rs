//! The `v1` checkpoint container.
//!
//! Layout: one ASCII header line `moetion-ckpt v1 <manifest_bytes>`, then a
//! JSON manifest mapping names to dtype/shape/byte-offset, then raw
//! little-endian payloads. Offsets are relative to the payload start.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{precision, Precision, Tensor};

const MAGIC: &str = "moetion-ckpt";
pub const VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

/// An in-memory checkpoint: named tensors plus free-form string metadata.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {:?}", name)))
    }

    pub fn meta_get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {:?}", key)))
    }

    /// Capture every parameter of a store, names preserved.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut ckpt = Checkpoint::new();
        for id in store.ids() {
            ckpt.insert(store.name(id), store.value(id).clone());
        }
        ckpt
    }

    /// Write values back into an existing store by name. Every store
    /// parameter must be present in the checkpoint.
    pub fn load_into_store(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id).to_string();
            let t = self.get(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {:?}: checkpoint {:?}, store {:?}",
                    name,
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dtype = match precision() {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let elem = if dtype == "f32" { 4 } else { 8 };
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.numel() * elem) as u64;
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = Manifest {
            version: VERSION.to_string(),
            meta: self.meta.clone(),
            entries,
        };
        let manifest_json =
            serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {} {}", MAGIC, VERSION, manifest_json.len())?;
        w.write_all(&manifest_json)?;
        for t in self.tensors.values() {
            for &v in t.data() {
                if elem == 4 {
                    w.write_all(&(v as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 128 {
                return Err(Error::Checkpoint("header line too long".into()));
            }
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Checkpoint("non-utf8 header".into()))?;
        let mut parts = header.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(MAGIC), Some(VERSION)) => {}
            (Some(MAGIC), Some(v)) => {
                return Err(Error::Checkpoint(format!("unsupported version {:?}", v)))
            }
            _ => return Err(Error::Checkpoint("not a checkpoint file".into())),
        }
        let manifest_len: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad manifest length".into()))?;
        let mut manifest_json = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_json)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_json)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {}", e)))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut ckpt = Checkpoint::new();
        ckpt.meta = manifest.meta;
        for e in manifest.entries {
            let elem = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                d => return Err(Error::Checkpoint(format!("unknown dtype {:?}", d))),
            };
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if e.len as usize != numel * elem || end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "bad payload range for {:?}",
                    e.name
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in payload[start..end].chunks_exact(elem) {
                let v = if elem == 4 {
                    f32::from_le_bytes(chunk.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(chunk.try_into().unwrap())
                };
                data.push(v);
            }
            ckpt.tensors
                .insert(e.name.clone(), Tensor::from_vec(e.shape, data));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.insert("a/w", Tensor::from_vec_q(vec![2, 2], vec![1.5, -2.25, 0.0, 3.0]));
        ckpt.insert("b", Tensor::from_vec_q(vec![3], vec![0.1, 0.2, 0.3]));
        ckpt.meta.insert("kind".into(), "test".into());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta_get("kind").unwrap(), "test");
        assert_eq!(loaded.get("a/w").unwrap(), ckpt.get("a/w").unwrap());
        assert_eq!(loaded.get("b").unwrap(), ckpt.get("b").unwrap());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\n").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let ckpt = Checkpoint::new();
        assert!(ckpt.get("nope").is_err());
    }
}
