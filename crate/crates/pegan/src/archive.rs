//! Single-file tensor archive, shared by model checkpoints, recognizer
//! snapshots and perception-net weight bundles.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, the JSON
//! manifest, then the raw payload. The manifest lists entries
//! `{name, shape, dtype, offset, length}` with offsets relative to the start
//! of the payload. Numeric payloads are little-endian IEEE-754 in C order
//! (row-major); `dtype` is `f64`, `f32` (read-only, widened on load) or
//! `json` for structured metadata. Entries are stored sorted by name, so
//! writing the same contents always produces the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TNSARCH1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

enum Payload {
    F64(Vec<usize>, Vec<f64>),
    F32(Vec<usize>, Vec<f32>),
    Json(Vec<u8>),
}

/// In-memory archive: build with `put_*`, persist with [`Archive::save`].
#[derive(Default)]
pub struct Archive {
    entries: BTreeMap<String, Payload>,
}

impl Archive {
    pub fn new() -> Archive {
        Archive::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn put_f64s(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Archive(format!(
                "entry {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if self
            .entries
            .insert(name.to_string(), Payload::F64(shape.to_vec(), data.to_vec()))
            .is_some()
        {
            return Err(Error::Archive(format!("duplicate entry name {name}")));
        }
        Ok(())
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.put_f64s(name, t.shape(), &t.data())
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        if self
            .entries
            .insert(name.to_string(), Payload::Json(bytes))
            .is_some()
        {
            return Err(Error::Archive(format!("duplicate entry name {name}")));
        }
        Ok(())
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        match self.entries.get(name) {
            Some(Payload::F64(s, _)) | Some(Payload::F32(s, _)) => Ok(s),
            Some(Payload::Json(_)) => Err(Error::Archive(format!("{name} is a json entry"))),
            None => Err(Error::Archive(format!("missing entry {name}"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.entries.get(name) {
            Some(Payload::F64(s, d)) => Ok((s.clone(), d.clone())),
            Some(Payload::F32(s, d)) => {
                Ok((s.clone(), d.iter().map(|&v| v as f64).collect()))
            }
            Some(Payload::Json(_)) => Err(Error::Archive(format!("{name} is a json entry"))),
            None => Err(Error::Archive(format!("missing entry {name}"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.f64s(name)?;
        Tensor::new(&shape, data)
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        match self.entries.get(name) {
            Some(Payload::Json(bytes)) => Ok(serde_json::from_slice(bytes)?),
            Some(_) => Err(Error::Archive(format!("{name} is not a json entry"))),
            None => Err(Error::Archive(format!("missing entry {name}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Manifest { entries: Vec::new() };
        let mut payload: Vec<u8> = Vec::new();
        // BTreeMap iteration is name-sorted: byte-stable output.
        for (name, entry) in &self.entries {
            let offset = payload.len() as u64;
            let (shape, dtype) = match entry {
                Payload::F64(shape, data) => {
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    (shape.clone(), "f64")
                }
                Payload::F32(shape, data) => {
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    (shape.clone(), "f32")
                }
                Payload::Json(bytes) => {
                    payload.extend_from_slice(bytes);
                    (Vec::new(), "json")
                }
            };
            manifest.entries.push(ManifestEntry {
                name: name.clone(),
                shape,
                dtype: dtype.to_string(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Archive(format!("{}: truncated header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Archive(format!(
                "{}: bad magic, not a tensor archive",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|_| Error::Archive(format!("{}: truncated manifest length", path.display())))?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        f.read_exact(&mut manifest_bytes)
            .map_err(|_| Error::Archive(format!("{}: truncated manifest", path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Archive(format!("{}: bad manifest: {e}", path.display())))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;

        let mut entries = BTreeMap::new();
        for e in manifest.entries {
            let start = e.offset as usize;
            let end = start + e.length as usize;
            let bytes = payload.get(start..end).ok_or_else(|| {
                Error::Archive(format!("{}: entry {} out of payload bounds", path.display(), e.name))
            })?;
            let numel: usize = e.shape.iter().product();
            let value = match e.dtype.as_str() {
                "f64" => {
                    if bytes.len() != numel * 8 {
                        return Err(Error::Archive(format!(
                            "entry {}: {} bytes for {} f64 values",
                            e.name,
                            bytes.len(),
                            numel
                        )));
                    }
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Payload::F64(e.shape, data)
                }
                "f32" => {
                    if bytes.len() != numel * 4 {
                        return Err(Error::Archive(format!(
                            "entry {}: {} bytes for {} f32 values",
                            e.name,
                            bytes.len(),
                            numel
                        )));
                    }
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Payload::F32(e.shape, data)
                }
                "json" => Payload::Json(bytes.to_vec()),
                other => {
                    return Err(Error::Archive(format!(
                        "entry {}: unsupported dtype {other}",
                        e.name
                    )))
                }
            };
            if entries.insert(e.name.clone(), value).is_some() {
                return Err(Error::Archive(format!("duplicate entry name {}", e.name)));
            }
        }
        Ok(Archive { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_tensor_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tar1");
        let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let mut ar = Archive::new();
        ar.put_tensor("w", &t).unwrap();
        ar.put_json("meta", &serde_json::json!({"step": 3})).unwrap();
        ar.save(&path).unwrap();

        let back = Archive::load(&path).unwrap();
        let t2 = back.tensor("w").unwrap();
        assert_eq!(t2.shape(), t.shape());
        assert_eq!(t2.to_vec(), t.to_vec());
        let meta: serde_json::Value = back.json("meta").unwrap();
        assert_eq!(meta["step"], 3);
    }

    #[test]
    fn save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        let mut ar = Archive::new();
        // Insertion order differs from name order; output must not care.
        ar.put_f64s("zz", &[2], &[1.0, 2.0]).unwrap();
        ar.put_f64s("aa", &[1], &[3.0]).unwrap();
        ar.save(&p1).unwrap();
        let loaded = Archive::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ar = Archive::new();
        ar.put_f64s("x", &[1], &[1.0]).unwrap();
        assert!(ar.put_f64s("x", &[1], &[2.0]).is_err());
    }

    #[test]
    fn missing_entry_reported() {
        let ar = Archive::new();
        assert!(matches!(ar.tensor("nope"), Err(Error::Archive(_))));
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not an archive at all").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Archive(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_bits_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.tar1");
            let mut ar = Archive::new();
            ar.put_f64s("v", &[values.len()], &values).unwrap();
            ar.save(&path).unwrap();
            let back = Archive::load(&path).unwrap();
            let (shape, data) = back.f64s("v").unwrap();
            prop_assert_eq!(shape, vec![values.len()]);
            // Bit-exact, not approximately equal.
            for (a, b) in data.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
