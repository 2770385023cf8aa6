//! COCO-style annotation ingestion and export (the `images` / `annotations` /
//! `categories` subset).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image_io::{read_image, write_f32_blob};
use super::types::{Annotation, Catalog, Sample};
use crate::error::{Error, Result};

/// Slack in pixels allowed for boxes poking outside the image before the
/// record is rejected; boxes inside the slack are clamped.
pub const BOX_SLACK_PX: f64 = 1.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in absolute pixels.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// A rejected image or annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecordError {
    /// `"image 12"` or `"annotation 40"`.
    pub record: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<RecordError>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestOptions {
    /// Abort on the first bad record instead of collecting it.
    pub fail_fast: bool,
}

/// Converts an absolute `[x, y, w, h]` box to normalized `cxcywh`, clamping
/// overshoot within [`BOX_SLACK_PX`].
pub fn coco_box_to_cxcywh(
    bbox: [f64; 4],
    width: usize,
    height: usize,
) -> std::result::Result<[f64; 4], String> {
    let [x, y, w, h] = bbox;
    if !bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(format!("degenerate bbox {bbox:?}"));
    }
    let (fw, fh) = (width as f64, height as f64);
    if x < -BOX_SLACK_PX || y < -BOX_SLACK_PX || x + w > fw + BOX_SLACK_PX || y + h > fh + BOX_SLACK_PX {
        return Err(format!("bbox {bbox:?} outside {width}x{height} image"));
    }
    let x0 = x.max(0.0);
    let y0 = y.max(0.0);
    let x1 = (x + w).min(fw);
    let y1 = (y + h).min(fh);
    if x1 <= x0 || y1 <= y0 {
        return Err(format!("bbox {bbox:?} empty after clamping"));
    }
    Ok([
        (x0 + x1) / 2.0 / fw,
        (y0 + y1) / 2.0 / fh,
        (x1 - x0) / fw,
        (y1 - y0) / fh,
    ])
}

/// Reads one modality's COCO file. Category names are resolved against the
/// catalog and must belong to `modality_name`; image ids become sample ids.
pub fn ingest_coco(
    annotation_json: &Path,
    image_dir: &Path,
    modality_name: &str,
    catalog: &Catalog,
    opts: IngestOptions,
) -> Result<IngestReport> {
    let text = std::fs::read_to_string(annotation_json).map_err(|e| Error::io(annotation_json, e))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(annotation_json, e.to_string()))?;
    let modality_id = catalog
        .modality_index(modality_name)
        .ok_or_else(|| Error::Lookup(format!("modality {modality_name:?} not in catalog")))?;

    let mut seen = BTreeSet::new();
    for img in &coco.images {
        if !seen.insert(img.id) {
            return Err(Error::Duplicate(format!(
                "image id {} in {}",
                img.id,
                annotation_json.display()
            )));
        }
    }

    let mut report = IngestReport::default();
    let fail = |report: &mut IngestReport, record: String, reason: String| -> Result<()> {
        if opts.fail_fast {
            return Err(Error::malformed(annotation_json, format!("{record}: {reason}")));
        }
        report.errors.push(RecordError { record, reason });
        Ok(())
    };

    let mut category_map = BTreeMap::new();
    for cat in &coco.categories {
        match catalog.class_index(&cat.name) {
            Some(c) if catalog.classes[c].modality_id == modality_id => {
                category_map.insert(cat.id, c);
            }
            _ => fail(
                &mut report,
                format!("category {}", cat.id),
                format!("{:?} is not a class of {modality_name}", cat.name),
            )?,
        }
    }

    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for ann in &coco.annotations {
        if !seen.contains(&ann.image_id) {
            fail(
                &mut report,
                format!("annotation {}", ann.id),
                format!("unknown image id {}", ann.image_id),
            )?;
            continue;
        }
        by_image.entry(ann.image_id).or_default().push(ann);
    }

    'images: for img in &coco.images {
        let path: PathBuf = image_dir.join(&img.file_name);
        let image = match read_image(&path, img.height, img.width) {
            Ok(t) => t,
            Err(e) => {
                fail(&mut report, format!("image {}", img.id), e.to_string())?;
                continue;
            }
        };
        let mut annotations = Vec::new();
        for ann in by_image.get(&img.id).into_iter().flatten() {
            let Some(&class_id) = category_map.get(&ann.category_id) else {
                fail(
                    &mut report,
                    format!("annotation {}", ann.id),
                    format!("unmapped category id {}", ann.category_id),
                )?;
                continue;
            };
            match coco_box_to_cxcywh(ann.bbox, img.width, img.height) {
                Ok(bbox) => annotations.push(Annotation { bbox, class_id }),
                Err(reason) => {
                    fail(&mut report, format!("annotation {}", ann.id), reason)?;
                    continue 'images;
                }
            }
        }
        report.samples.push(Sample {
            sample_id: img.id,
            image,
            modality_id,
            annotations,
        });
    }
    Ok(report)
}

/// Writes the samples of one modality as a COCO file plus `.f32` image blobs
/// named `<sample_id>.f32` in `image_dir`.
pub fn export_coco(
    samples: &[Sample],
    modality_id: usize,
    catalog: &Catalog,
    annotation_json: &Path,
    image_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let categories = catalog
        .classes_of(modality_id)
        .into_iter()
        .map(|c| CocoCategory {
            id: c as u64,
            name: catalog.classes[c].name.clone(),
        })
        .collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for s in samples.iter().filter(|s| s.modality_id == modality_id) {
        let file_name = format!("{}.f32", s.sample_id);
        write_f32_blob(&image_dir.join(&file_name), &s.image)?;
        let (h, w) = (s.height() as f64, s.width() as f64);
        images.push(CocoImage {
            id: s.sample_id,
            file_name,
            width: s.width(),
            height: s.height(),
        });
        for a in &s.annotations {
            let [cx, cy, bw, bh] = a.bbox;
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.sample_id,
                category_id: a.class_id as u64,
                bbox: [(cx - bw / 2.0) * w, (cy - bh / 2.0) * h, bw * w, bh * h],
            });
        }
    }
    let file = CocoFile {
        images,
        annotations,
        categories,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(annotation_json, text).map_err(|e| Error::io(annotation_json, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::types::ClassInfo;

    fn catalog() -> Catalog {
        Catalog {
            modalities: vec!["CXR".into(), "MRI".into()],
            classes: vec![
                ClassInfo { name: "Nodule".into(), modality_id: 0 },
                ClassInfo { name: "Brain tumor".into(), modality_id: 1 },
            ],
        }
    }

    fn write_json(dir: &Path, v: serde_json::Value) -> PathBuf {
        let p = dir.join("ann.json");
        std::fs::write(&p, v.to_string()).unwrap();
        p
    }

    fn blank(dir: &Path, name: &str, h: usize, w: usize) {
        write_f32_blob(&dir.join(name), &Tensor::zeros(h, w)).unwrap();
    }

    #[test]
    fn converts_pixel_box() {
        let b = coco_box_to_cxcywh([10.0, 10.0, 20.0, 20.0], 100, 100).unwrap();
        for v in b {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!(coco_box_to_cxcywh([90.0, 0.0, 12.0, 5.0], 100, 100).is_err());
        let clamped = coco_box_to_cxcywh([-0.5, 0.0, 10.5, 10.0], 100, 100).unwrap();
        assert_eq!(clamped[2], 0.1);
    }

    #[test]
    fn empty_annotations_and_record_errors() {
        let dir = tempfile::tempdir().unwrap();
        blank(dir.path(), "a.f32", 8, 8);
        let json = write_json(
            dir.path(),
            serde_json::json!({
                "images": [
                    {"id": 1, "file_name": "a.f32", "width": 8, "height": 8},
                    {"id": 2, "file_name": "missing.f32", "width": 8, "height": 8}
                ],
                "annotations": [],
                "categories": [{"id": 5, "name": "Nodule"}]
            }),
        );
        let rep = ingest_coco(&json, dir.path(), "CXR", &catalog(), IngestOptions::default()).unwrap();
        assert_eq!(rep.samples.len(), 1);
        assert!(rep.samples[0].annotations.is_empty());
        assert_eq!(rep.errors.len(), 1);
        assert_eq!(rep.errors[0].record, "image 2");
        let ff = IngestOptions { fail_fast: true };
        assert!(ingest_coco(&json, dir.path(), "CXR", &catalog(), ff).is_err());
    }

    #[test]
    fn duplicate_image_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let json = write_json(
            dir.path(),
            serde_json::json!({
                "images": [
                    {"id": 1, "file_name": "a.f32", "width": 8, "height": 8},
                    {"id": 1, "file_name": "b.f32", "width": 8, "height": 8}
                ],
                "categories": []
            }),
        );
        let err = ingest_coco(&json, dir.path(), "CXR", &catalog(), IngestOptions::default());
        assert!(matches!(err, Err(Error::Duplicate(_))));
    }

    #[test]
    fn foreign_category_and_out_of_bounds_box() {
        let dir = tempfile::tempdir().unwrap();
        blank(dir.path(), "a.f32", 10, 10);
        let json = write_json(
            dir.path(),
            serde_json::json!({
                "images": [{"id": 3, "file_name": "a.f32", "width": 10, "height": 10}],
                "annotations": [
                    {"id": 1, "image_id": 3, "category_id": 0, "bbox": [0, 0, 12, 4]}
                ],
                "categories": [{"id": 0, "name": "Nodule"}, {"id": 1, "name": "Brain tumor"}]
            }),
        );
        let rep = ingest_coco(&json, dir.path(), "CXR", &catalog(), IngestOptions::default()).unwrap();
        assert!(rep.samples.is_empty());
        let records: Vec<_> = rep.errors.iter().map(|e| e.record.as_str()).collect();
        assert_eq!(records, ["category 1", "annotation 1"]);
    }
}
