//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` (magic, tensor
//! names, shapes and byte offsets, plus caller metadata) and `params.bin`,
//! the concatenated little-endian `f64` data. Both files are replaced
//! atomically.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "UBCKPT1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a parameter that the optimizer never updates.
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.frozen.insert(name.clone());
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Puts a parameter on the tape: trainable ones as named leaves,
    /// frozen ones as constants.
    pub fn var<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        let t = self.get(name)?.clone();
        Ok(if self.is_frozen(name) {
            tape.constant(t)
        } else {
            tape.param(name, t)
        })
    }

    pub fn save(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                frozen: self.frozen.contains(name),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            magic: CHECKPOINT_MAGIC.to_string(),
            tensors: entries,
            meta: meta.clone(),
        };
        write_atomic(&dir.join(BLOB), &blob)?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}, expected {CHECKPOINT_MAGIC}",
                manifest.magic
            )));
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("tensor {} overruns blob", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            if e.frozen {
                store.insert_frozen(e.name, t);
            } else {
                store.insert(e.name, t);
            }
        }
        Ok((store, manifest.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    #[serde(default)]
    frozen: bool,
}

/// Scaled Gaussian initialization with standard deviation `gain / sqrt(fan_in)`.
pub fn init_normal(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape product")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("b", Tensor::vector(vec![1.5, -2.0]));
        store.insert_frozen("a.table", Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let meta = serde_json::json!({"d": 2});
        store.save(dir.path(), &meta).unwrap();
        let (loaded, m) = ParamStore::load(dir.path()).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(m, meta);
        assert!(loaded.is_frozen("a.table"));
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        ParamStore::new().save(dir.path(), &serde_json::Value::Null).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("UBCKPT1", "UBCKPT0");
        fs::write(&path, text).unwrap();
        let err = ParamStore::load(dir.path()).unwrap_err();
        assert_eq!(err.code(), "CHECKPOINT_ERROR");
    }

    #[test]
    fn frozen_params_enter_tape_as_constants() {
        let mut store = ParamStore::new();
        store.insert_frozen("t", Tensor::scalar(2.0));
        store.insert("w", Tensor::scalar(3.0));
        let tape = Tape::new();
        let t = store.var(&tape, "t").unwrap();
        let w = store.var(&tape, "w").unwrap();
        let g = tape.backward(t.mul(w).unwrap()).unwrap().params();
        assert!(g.contains_key("w") && !g.contains_key("t"));
    }
}
