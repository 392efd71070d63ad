// SPDX-License-Identifier: MIT OR Apache-2.0

//! Manifest + blob tensor container.
//!
//! A store is a directory holding `manifest.json` and one or more `.bin`
//! files of raw little-endian `f32`, row-major. The manifest maps each
//! tensor name to its shape, dtype, file and byte offset. Model bundles
//! and tuned-lens translators both use this layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "lenslab-tensors/1";
const DEFAULT_BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `model` or `translators`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A dense f32 tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// In-memory view of a tensor store: manifest header plus decoded tensors.
#[derive(Debug, Clone)]
pub struct TensorStore {
    pub kind: String,
    pub architecture: Option<String>,
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            architecture: None,
            metadata: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Fetch a tensor and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    /// Write the manifest and a single blob file. Tensors are laid out in
    /// name order, so identical stores produce identical bytes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    file: DEFAULT_BLOB.into(),
                    offset: blob.len() as u64,
                },
            );
            blob.reserve(t.data.len() * 4);
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let blob_path = dir.join(DEFAULT_BLOB);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json(dir.join(MANIFEST_FILE), e))?;
        let man_path = dir.join(MANIFEST_FILE);
        fs::write(&man_path, json + "\n").map_err(|e| Error::io(&man_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&man_path, e))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Bundle(format!(
                "unsupported manifest format {:?}",
                manifest.format
            )));
        }

        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Bundle(format!(
                    "tensor {name}: unsupported dtype {}",
                    entry.dtype
                )));
            }
            if entry.file.contains("..") || entry.file.starts_with('/') {
                return Err(Error::Bundle(format!(
                    "tensor {name}: blob path escapes the bundle directory"
                )));
            }
            if !blobs.contains_key(&entry.file) {
                let p = dir.join(&entry.file);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                blobs.insert(entry.file.clone(), bytes);
            }
            let bytes = &blobs[&entry.file];
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 4;
            if end > bytes.len() {
                return Err(Error::Bundle(format!(
                    "tensor {name}: byte range {start}..{end} exceeds {} ({} bytes)",
                    entry.file,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
            tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        Ok(Self {
            kind: manifest.kind,
            architecture: manifest.architecture,
            metadata: manifest.metadata,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_then_load_preserves_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new("model");
        s.insert("a", Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()));
        s.insert("b", Tensor::new(vec![1], vec![-0.5]));
        s.save(dir.path()).unwrap();
        let back = TensorStore::load(dir.path()).unwrap();
        assert_eq!(back.tensors, s.tensors);
        assert_eq!(back.kind, "model");
    }

    #[test]
    fn non_finite_weight_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new("model");
        s.insert("w", Tensor::new(vec![2], vec![1.0, f32::NAN]));
        s.save(dir.path()).unwrap();
        let err = TensorStore::load(dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value in tensor w");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new("model");
        s.insert("w", Tensor::new(vec![4], vec![1.0; 4]));
        s.save(dir.path()).unwrap();
        fs::write(dir.path().join("tensors.bin"), [0u8; 8]).unwrap();
        assert!(matches!(
            TensorStore::load(dir.path()),
            Err(Error::Bundle(_))
        ));
    }
}
