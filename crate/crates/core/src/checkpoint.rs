//! Single-file tensor archive.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest,
//! then the raw tensor blobs back to back. Offsets in the manifest are
//! relative to the start of the blob region, so the manifest can be
//! rewritten without touching the payload. All values are stored as
//! little-endian f32 bit patterns, which makes round-trips bit-exact,
//! including negative zero and subnormals.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// An ordered, named collection of tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Archive {
        Archive::default()
    }

    /// Insert or replace by name. Order of first insertion is preserved,
    /// which keeps byte output deterministic.
    pub fn put(&mut self, name: &str, t: &Tensor) {
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| n == name) {
            slot.1 = t.clone();
        } else {
            self.tensors.push((name.to_string(), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.numel() * 4) as u64;
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mjson = serde_json::to_vec(&manifest)?;
        w.write_all(&(mjson.len() as u64).to_le_bytes())?;
        w.write_all(&mjson)?;
        let mut blob = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Archive> {
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let mlen = u64::from_le_bytes(len_buf) as usize;
        let mut mjson = vec![0u8; mlen];
        r.read_exact(&mut mjson)?;
        let manifest: Manifest = serde_json::from_slice(&mjson)?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has unsupported dtype {:?}",
                    e.name, e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + numel * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} extends past end of archive",
                    e.name
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(data, &e.shape)?));
        }
        Ok(Archive {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
        let mut f = std::fs::File::open(path)?;
        Archive::read_from(&mut f)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new();
        a.meta.insert("kind".into(), "test".into());
        a.put(
            "w",
            &Tensor::new(vec![1.5, -0.0, f32::MIN_POSITIVE / 2.0, 3.25e-7], &[2, 2]).unwrap(),
        );
        a.put("b", &Tensor::new(vec![0.1, 0.2, 0.3], &[3]).unwrap());
        let bytes = a.to_bytes().unwrap();
        let back = Archive::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.meta.get("kind").map(String::as_str), Some("test"));
        assert_eq!(back.len(), 2);
        for (name, t) in a.iter() {
            let r = back.require(name).unwrap();
            assert_eq!(r.shape(), t.shape());
            assert!(r.bits_eq(t), "{name} not bit-identical");
        }
        // Negative zero survives with its sign bit.
        assert_eq!(back.require("w").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut a = Archive::new();
        a.meta.insert("b".into(), "2".into());
        a.meta.insert("a".into(), "1".into());
        a.put("x", &Tensor::new(vec![1.0, 2.0], &[2]).unwrap());
        let b1 = a.to_bytes().unwrap();
        let b2 = a.to_bytes().unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn put_replaces_in_place() {
        let mut a = Archive::new();
        a.put("x", &Tensor::scalar(1.0));
        a.put("y", &Tensor::scalar(2.0));
        a.put("x", &Tensor::scalar(9.0));
        assert_eq!(a.len(), 2);
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["x", "y"]);
        assert_eq!(a.require("x").unwrap().item().unwrap(), 9.0);
    }

    #[test]
    fn truncated_archive_is_an_error() {
        let mut a = Archive::new();
        a.put("x", &Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap());
        let bytes = a.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(Archive::read_from(&mut &cut[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut a = Archive::new();
        a.put("w", &Tensor::new(vec![0.5; 10], &[2, 5]).unwrap());
        a.save(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        assert!(back.require("w").unwrap().bits_eq(a.require("w").unwrap()));
    }
}
