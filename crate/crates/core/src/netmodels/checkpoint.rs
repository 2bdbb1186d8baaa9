//! Parameter checkpoints: a flat little-endian `f64` file plus a JSON
//! manifest of names, groups and shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, ModelError, ParamStore};
use crate::diffmath::Tensor;

pub const DATA_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.json";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    group: String,
    shape: Vec<usize>,
    /// Offset into the data file, in values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format: String,
    values: usize,
    params: Vec<Entry>,
}

fn io_err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

/// Writes `params.bin` and `params.json` into `dir`.
pub fn save(store: &ParamStore, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut bytes = Vec::with_capacity(8 * store.iter().map(|p| p.value.len()).sum::<usize>());
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        params.push(Entry {
            name: p.name.clone(),
            group: p.group.name().to_string(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { format: "f64-le".into(), values: offset, params };
    fs::write(dir.join(DATA_FILE), bytes).map_err(io_err)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(io_err)?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(io_err)
}

pub fn load(dir: &Path) -> Result<ParamStore, ModelError> {
    let json = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(io_err)?;
    let manifest: Manifest = serde_json::from_str(&json).map_err(io_err)?;
    if manifest.format != "f64-le" {
        return Err(ModelError::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    let bytes = fs::read(dir.join(DATA_FILE)).map_err(io_err)?;
    if bytes.len() != 8 * manifest.values {
        return Err(ModelError::Checkpoint(format!(
            "data file holds {} bytes, manifest expects {} values",
            bytes.len(),
            manifest.values
        )));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let mut store = ParamStore::new();
    for e in manifest.params {
        let group = Group::parse(&e.group).ok_or_else(|| io_err(format!("unknown group {}", e.group)))?;
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| io_err(format!("tensor {} runs past the data", e.name)))?;
        let t = Tensor::new(e.shape, data.to_vec()).map_err(io_err)?;
        store.add(e.name, group, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.add("a", Group::Encoder, Tensor::from_rows(&[vec![0.1, -2.5e-300], vec![3.0, f64::MIN_POSITIVE]]).unwrap());
        store.add("b", Group::Alpha, Tensor::scalar(std::f64::consts::PI));
        store.add("c", Group::Buffer, Tensor::row(vec![1.0, 2.0, 3.0]));
        let dir = tempfile::tempdir().unwrap();
        save(&store, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), store);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Group::Encoder, Tensor::row(vec![1.0, 2.0]));
        let dir = tempfile::tempdir().unwrap();
        save(&store, dir.path()).unwrap();
        fs::write(dir.path().join(DATA_FILE), [0u8; 8]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
