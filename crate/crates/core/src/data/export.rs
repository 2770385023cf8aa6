//! Dataset directory format.
//!
//! `<name>.json` is the manifest, `<name>.f32` the pixel blob. The blob is
//! every image's pixels in row-major order as little-endian `f32`, images
//! concatenated in manifest order; `offset` in each record counts `f32`
//! elements (not bytes) from the start of the blob. Generated images are
//! quantized to `f32` at render time, so the round trip is exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{Annotation, Catalog, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "modalign-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub catalog: Catalog,
    pub blob: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub modality_id: usize,
    pub height: usize,
    pub width: usize,
    pub offset: usize,
    pub annotations: Vec<Annotation>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.f32")))
}

pub fn export_dataset(dir: &Path, name: &str, catalog: &Catalog, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest_path, blob_path) = paths(dir, name);
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for s in samples {
        catalog.check_sample(s)?;
        for &v in s.image.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        records.push(SampleRecord {
            sample_id: s.sample_id,
            modality_id: s.modality_id,
            height: s.height(),
            width: s.width(),
            offset,
            annotations: s.annotations.clone(),
        });
        offset += s.image.len();
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        catalog: catalog.clone(),
        blob: format!("{name}.f32"),
        samples: records,
    };
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<(Catalog, Vec<Sample>)> {
    let (manifest_path, _) = paths(dir, name);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Error::malformed(
            &manifest_path,
            format!("unsupported format {} v{}", m.format, m.version),
        ));
    }
    let blob_path = dir.join(&m.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for r in m.samples {
        let n = r.height * r.width;
        let range = r.offset * 4..(r.offset + n) * 4;
        let chunk = bytes.get(range).ok_or_else(|| {
            Error::malformed(&blob_path, format!("sample {} out of blob range", r.sample_id))
        })?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let sample = Sample {
            sample_id: r.sample_id,
            image: Tensor::matrix(r.height, r.width, data)?,
            modality_id: r.modality_id,
            annotations: r.annotations,
        };
        m.catalog.check_sample(&sample)?;
        samples.push(sample);
    }
    Ok((m.catalog, samples))
}
