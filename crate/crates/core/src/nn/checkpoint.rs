//! Network checkpoints: parameter values as one little-endian `f64` blob
//! (`.bin`) next to a JSON manifest (`.json`) naming every array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{Layout, MicroNet, NetConfig, ParamStore};
use super::{NnError, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values, not bytes.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: NetConfig,
    pub layout: Layout,
    pub arrays: Vec<ArrayEntry>,
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn err(path: &Path, reason: impl Into<String>) -> NnError {
    NnError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `path` (values) and `path` with a `.json` extension (manifest).
pub fn save_checkpoint(net: &MicroNet, path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(net.params().scalar_count() * 8);
    let mut arrays = Vec::with_capacity(net.params().len());
    let mut offset = 0;
    for (name, t) in net.params().iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: *net.config(),
        layout: net.layout(),
        arrays,
    };
    fs::write(path, blob)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| err(path, e.to_string()))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MicroNet> {
    let mpath = manifest_path(path);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| err(&mpath, e.to_string()))?;
    let blob = fs::read(path)?;
    if blob.len() % 8 != 0 {
        return Err(err(
            path,
            format!("{} bytes is not a whole number of f64 values", blob.len()),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::default();
    for a in &manifest.arrays {
        let slice = values
            .get(a.offset..a.offset + a.len)
            .ok_or_else(|| err(path, format!("array {} runs past the end of the data", a.name)))?;
        store.push(a.name.clone(), Tensor::new(a.shape.clone(), slice.to_vec())?);
    }
    let mut net = MicroNet::new(manifest.config, manifest.layout, 0)?;
    net.set_params(store).map_err(|e| err(path, e.to_string()))?;
    Ok(net)
}
