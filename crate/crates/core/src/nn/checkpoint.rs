//! Portable checkpoint files.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "SSMCKPT1"
//! bytes 8..16   manifest length L, u64 little-endian
//! bytes 16..16+L  manifest, UTF-8 JSON
//! remainder     tensor blobs, f32 little-endian, at the offsets listed
//!               in the manifest (relative to the start of the blob area)
//! ```
//!
//! The manifest records the config hash, the full config, the epoch, free-form
//! trainer state, and one entry per tensor (`name`, `shape`, `offset`, `len`).
//! Parameters are stored under their own names; Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{Adam, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Loaded checkpoint: manifest plus tensors by name.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

/// SHA-256 of the compact JSON serialization, hex encoded.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    epoch: usize,
    state: serde_json::Value,
    store: &ParamStore<f32>,
    adam: Option<&Adam<f32>>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f32]| {
        entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: blob.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in store.params() {
        push(p.name.clone(), &p.shape, &p.value);
    }
    if let Some(adam) = adam {
        for (i, p) in store.params().iter().enumerate() {
            push(format!("adam.m/{}", p.name), &p.shape, &adam.m[i]);
            push(format!("adam.v/{}", p.name), &p.shape, &adam.v[i]);
        }
    }
    let manifest = Manifest {
        config_hash: config_hash(config),
        config: config.clone(),
        epoch,
        state,
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blob);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::corrupt(path, 0, "missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let start = 16usize;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, 8, "manifest length exceeds file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[start..end])
        .map_err(|e| Error::corrupt(path, start as u64, format!("bad manifest: {e}")))?;
    let blob = &bytes[end..];
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let lo = t.offset as usize;
        let hi = lo + 4 * t.len as usize;
        if hi > blob.len() || t.shape.iter().product::<usize>() != t.len as usize {
            return Err(Error::corrupt(
                path,
                (end + lo) as u64,
                format!("tensor {} out of bounds or inconsistent", t.name),
            ));
        }
        let data = blob[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(t.name.clone(), (t.shape.clone(), data));
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    /// Copies stored parameters into a freshly built store of identical layout.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.params_mut() {
            let (shape, data) = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks tensor {}", p.name)))?;
            if *shape != p.shape {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {} has shape {shape:?}, model expects {:?}",
                    p.name, p.shape
                )));
            }
            p.value.copy_from_slice(data);
        }
        Ok(())
    }

    /// Optimizer moments, if the checkpoint carries them.
    pub fn restore_adam(&self, store: &ParamStore<f32>, step: u64) -> Result<Option<Adam<f32>>> {
        let mut adam = Adam::new(store);
        adam.step = step;
        for (i, p) in store.params().iter().enumerate() {
            let m = self.tensors.get(&format!("adam.m/{}", p.name));
            let v = self.tensors.get(&format!("adam.v/{}", p.name));
            match (m, v) {
                (Some((_, m)), Some((_, v))) if m.len() == p.value.len() && v.len() == p.value.len() => {
                    adam.m[i].copy_from_slice(m);
                    adam.v[i].copy_from_slice(v);
                }
                _ => return Ok(None),
            }
        }
        Ok(Some(adam))
    }
}
