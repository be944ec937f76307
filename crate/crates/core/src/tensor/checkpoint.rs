//! Flat little-endian `f64` blob plus a JSON sidecar listing `(name, shape, offset)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CKPT_VERSION: &str = "diffdyg-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in scalars (not bytes) into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub params: Vec<CheckpointEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Writes `blob` and its `.json` sidecar next to it.
pub fn save_checkpoint(store: &ParamStore, blob: &Path, meta: serde_json::Value) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, t) in store.iter() {
        params.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CKPT_VERSION.to_string(),
        params,
        meta,
    };
    fs::write(blob, bytes)?;
    fs::write(sidecar_path(blob), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_checkpoint(blob: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(blob))?)?;
    if header.version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}",
            header.version
        )));
    }
    let bytes = fs::read(blob)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} runs past the blob", e.name)))?;
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    Ok((store, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut store = ParamStore::new();
        store.add("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        store.add("b", Tensor::row_vector(vec![std::f64::consts::PI]));
        save_checkpoint(&store, &path, serde_json::json!({"d": 4})).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(header.version, CKPT_VERSION);
        assert_eq!(header.params[1].offset, 4);
        assert_eq!(header.meta["d"], 4);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let store = ParamStore::new();
        save_checkpoint(&store, &path, serde_json::Value::Null).unwrap();
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side).unwrap().replace(CKPT_VERSION, "other-9");
        fs::write(&side, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
