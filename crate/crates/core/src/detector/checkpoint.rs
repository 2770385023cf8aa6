//! Checkpoint files.
//!
//! `<stem>.json` holds the manifest: format tag, version, detector config,
//! step, seeds, free-form `extra` metadata, and the parameter table. Each
//! table row gives a tensor name, its `[rows, cols]` shape and its offset (in
//! `f32` elements) into `<stem>.f32`, which is the row-major data of every
//! tensor as little-endian `f32`, concatenated in table order. The detector's
//! own tensors come first, in the order documented on [`super::Detector`]'s
//! layout; other groups (`token_proj.*`, `align.*`) follow.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "modalign-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: DetectorConfig,
    pub step: u64,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.f32")))
}

/// Rounds every entry to the nearest `f32`, which is what a save/load cycle does.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub struct CheckpointHeader {
    pub config: DetectorConfig,
    pub step: u64,
    pub seeds: BTreeMap<String, u64>,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    header: &CheckpointHeader,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (json_path, blob_path) = checkpoint_paths(dir, stem);
    let mut blob = Vec::new();
    let mut table = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let (r, c) = t.dims();
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numerical(format!("{name} is not finite in f32")));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        table.push(TensorEntry {
            name: name.clone(),
            shape: [r, c],
            offset,
        });
        offset += r * c;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: header.config.clone(),
        step: header.step,
        seeds: header.seeds.clone(),
        extra: header.extra.clone(),
        blob: format!("{stem}.f32"),
        tensors: table,
    };
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let (json_path, _) = checkpoint_paths(dir, stem);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", json_path.display())))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            json_path.display(),
            m.format,
            m.version
        )));
    }
    let blob_path = dir.join(&m.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let [r, c] = e.shape;
        let chunk = bytes
            .get(e.offset * 4..(e.offset + r * c) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("{} exceeds blob", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((e.name.clone(), Tensor::matrix(r, c, data)?));
    }
    Ok((m, out))
}
