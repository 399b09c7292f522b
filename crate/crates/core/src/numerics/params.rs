use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

/// Name prefixes that hold optimizer state and fixed buffers rather than
/// trainable weights.
pub const RESERVED_PREFIXES: [&str; 3] = ["adamw.m.", "adamw.v.", "buffer."];

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors, iterated in sorted-name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    version: u64,
}

pub fn is_reserved(name: &str) -> bool {
    RESERVED_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| !is_reserved(n))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_reserved(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Adds a `[fan_in, fan_out]` weight and `[fan_out]` bias, both drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.init_uniform(&format!("{prefix}.weight"), &[fan_in, fan_out], bound, rng);
        self.init_uniform(&format!("{prefix}.bias"), &[fan_out], bound, rng);
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches length"));
    }

    /// Writes the JSON manifest to `path` and the raw little-endian f64 blob
    /// to the sidecar returned by [`blob_path`].
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            store_version: self.version,
            blob: blob_path(path)
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_bytes: blob.len() as u64,
            tensors: entries,
            meta,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(path, text)?;
        fs::write(blob_path(path), blob)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParameterStore::save`], validating
    /// every entry against the manifest.
    pub fn load(path: &Path) -> Result<(ParameterStore, serde_json::Value)> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_file)?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::Checkpoint(format!(
                "blob {} has {} bytes, manifest says {}",
                blob_file.display(),
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let mut store = ParameterStore::new();
        store.version = manifest.store_version;
        for e in manifest.tensors {
            let expected: u64 = e.shape.iter().product::<usize>() as u64;
            if expected != e.len {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` shape {:?} does not match length {}",
                    e.name, e.shape, e.len
                )));
            }
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{}` runs past the end of the blob", e.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok((store, manifest.meta))
    }
}

/// Sidecar blob path for a manifest path: `model.json` -> `model.json.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().map(|f| f.to_os_string()).unwrap_or_default();
    name.push(".bin");
    manifest.with_file_name(name)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    store_version: u64,
    blob: String,
    blob_bytes: u64,
    tensors: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_sorted_and_reserved_filtered() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::zeros(&[1]));
        s.insert("a", Tensor::zeros(&[2]));
        s.insert("adamw.m.a", Tensor::zeros(&[2]));
        s.insert("buffer.mean", Tensor::zeros(&[2]));
        assert_eq!(s.names().cloned().collect::<Vec<_>>(), ["a", "adamw.m.a", "b", "buffer.mean"]);
        assert_eq!(s.trainable_names().cloned().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.trainable_count(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.init_linear("layer", 4, 3, &mut rng);
        s.insert("scalar", Tensor::scalar(-0.125));
        s.set_version(17);
        s.save(&path, serde_json::json!({"kind": "test"})).unwrap();
        let (back, meta) = ParameterStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta["kind"], "test");
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[4]));
        s.save(&path, serde_json::Value::Null).unwrap();
        fs::write(blob_path(&path), [0u8; 16]).unwrap();
        assert!(matches!(ParameterStore::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn init_bounds() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        s.init_linear("l", 16, 8, &mut rng);
        assert!(s.get("l.weight").unwrap().data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(s.get("l.bias").unwrap().shape(), &[8]);
    }
}
