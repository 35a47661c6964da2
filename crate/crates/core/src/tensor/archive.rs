//! Tensor archive: one line of JSON manifest, then a little-endian payload.
//!
//! ```text
//! {"format":"fqdet-archive","version":1,"meta":{..},"tensors":[{"name":..,"dtype":"f64","shape":[..],"offset":0,"length":..}]}\n
//! <payload bytes>
//! ```
//!
//! `offset` and `length` are byte positions relative to the payload start.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "fqdet-archive";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.push(ArchiveEntry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

pub fn save_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(archive.entries.len());
    for e in &archive.entries {
        let offset = payload.len();
        match e.dtype {
            DType::F64 => e
                .tensor
                .data()
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => e
                .tensor
                .data()
                .iter()
                .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
        tensors.push(ManifestEntry {
            name: e.name.clone(),
            dtype: e.dtype,
            shape: e.tensor.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        meta: archive.meta.clone(),
        tensors,
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    // Write-then-rename keeps the previous archive intact if writing fails.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Archive {
        path: path.to_path_buf(),
        msg,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", manifest.format)));
    }
    let payload = &bytes[nl + 1..];
    let declared: usize = manifest.tensors.iter().map(|t| t.length).sum();
    if declared != payload.len() {
        return Err(bad(format!(
            "payload is {} bytes but manifest declares {declared}",
            payload.len()
        )));
    }
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.length != n * t.dtype.width() || t.offset + t.length > payload.len() {
            return Err(bad(format!("entry `{}` has inconsistent extent", t.name)));
        }
        let raw = &payload[t.offset..t.offset + t.length];
        let data: Vec<f64> = match t.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let tensor = Tensor::new(&t.shape, data).map_err(|e| bad(e.to_string()))?;
        entries.push(ArchiveEntry {
            name: t.name,
            dtype: t.dtype,
            tensor,
        });
    }
    Ok(Archive {
        meta: manifest.meta,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_length_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Archive {
            meta: serde_json::json!({"epoch": 3}),
            ..Archive::default()
        };
        a.push("w", DType::F64, Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        a.push("h", DType::F32, Tensor::from_vec(vec![0.5, 0.25]));
        save_archive(&path, &a).unwrap();
        let b = load_archive(&path).unwrap();
        assert_eq!(a, b);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        let err = load_archive(&path).unwrap_err();
        assert!(err.to_string().contains("manifest declares"), "{err}");
    }
}
