//! Tensor checkpoints: `index.json` (name -> shape, dtype, byte offset) plus
//! `weights.bin` holding the little-endian concatenation of every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Writes every parameter of `params` into `dir` (created if missing).
pub fn save_checkpoint(params: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    let mut bytes = Vec::with_capacity(params.numel() * 8);
    for p in params.iter() {
        index.insert(
            p.name.clone(),
            IndexEntry {
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                offset: bytes.len() as u64,
            },
        );
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
    Ok(())
}

/// Reads a checkpoint back, in storage order. Every tensor is marked
/// trainable; callers adjust flags to their configuration.
pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&text)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

    let mut entries: Vec<(String, IndexEntry)> = index.into_iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut store = ParamStore::new();
    for (name, entry) in entries {
        if entry.dtype != "f64" {
            return Err(Error::Data(format!(
                "{name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(Error::Data(format!(
                "{name}: bytes {start}..{end} beyond weights.bin length {}",
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(entry.shape, data)?, true);
    }
    Ok(store)
}
