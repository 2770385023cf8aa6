use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matching::{interpolated_precision, match_sorted, score_order, Flag};
use super::{iou_thresholds, Detection, EvalImage, SizeThresholds, MAX_DETS};
use crate::autodiff::Tensor;
use crate::data::{cxcywh_to_xyxy, Catalog};
use crate::error::{ensure, Error, Result};

/// Values in `[0, 1]`; `None` when no ground truth falls in scope.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAp {
    pub modality_id: usize,
    pub name: String,
    pub num_images: usize,
    pub metrics: Metrics,
}

/// Interpolated precision at the 101 recall points, IoU 0.50, all areas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub overall: Metrics,
    pub per_class: Vec<ClassAp>,
    pub per_modality: Vec<ModalityAp>,
    pub pr_curves: Vec<PrCurve>,
}

/// The `max` highest-scoring `(query, class)` pairs of one image as
/// detections, from `N × C` probabilities and `N × 4` boxes.
pub fn top_detections(image_id: u64, probs: &Tensor, boxes: &Tensor, max: usize) -> Result<Vec<Detection>> {
    let (n, c) = probs.dims();
    ensure!(boxes.dims() == (n, 4), Dimension, "boxes {:?} vs {n} queries", boxes.dims());
    let order = score_order(probs.data());
    Ok(order
        .into_iter()
        .take(max)
        .map(|k| {
            let b = boxes.row_slice(k / c);
            Detection {
                image_id,
                class_id: k % c,
                score: probs.data()[k],
                bbox: [b[0], b[1], b[2], b[3]],
            }
        })
        .collect())
}

/// Per class, area range and threshold: interpolated precision, or `None`
/// without in-range ground truth.
type Table = Vec<[[Option<[f64; 101]>; 10]; 4]>;

fn box_area(b: [f64; 4]) -> f64 {
    b[2] * b[3]
}

fn evaluate(
    images: &[&EvalImage],
    dets: &BTreeMap<u64, Vec<&Detection>>,
    classes: &[usize],
    sizes: &SizeThresholds,
) -> Result<Table> {
    let thresholds = iou_thresholds();
    let ranges = sizes.ranges();
    let mut table = Vec::with_capacity(classes.len());
    for &c in classes {
        let mut per_area: [[Option<[f64; 101]>; 10]; 4] = [[None; 10]; 4];
        for (a, &[lo, hi]) in ranges.iter().enumerate() {
            let in_range = |area: f64| area >= lo && area <= hi;
            let mut n_gt = 0;
            // Non-ignored (score, is_tp) pairs, per threshold.
            let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); thresholds.len()];
            for img in images {
                let gts: Vec<([f64; 4], bool)> = img
                    .annotations
                    .iter()
                    .filter(|g| g.class_id == c)
                    .map(|g| (g.xyxy(), !in_range(box_area(g.bbox))))
                    .collect();
                n_gt += gts.iter().filter(|g| !g.1).count();
                let ds: Vec<&Detection> = dets
                    .get(&img.image_id)
                    .map(|v| v.iter().copied().filter(|d| d.class_id == c).collect())
                    .unwrap_or_default();
                let pairs: Vec<([f64; 4], bool)> = ds
                    .iter()
                    .map(|d| (cxcywh_to_xyxy(d.bbox), !in_range(box_area(d.bbox))))
                    .collect();
                for (t, &thr) in thresholds.iter().enumerate() {
                    for (k, f) in match_sorted(&pairs, &gts, thr)?.into_iter().enumerate() {
                        if f != Flag::Ignored {
                            scored[t].push((ds[k].score, f == Flag::Tp));
                        }
                    }
                }
            }
            if n_gt == 0 {
                continue;
            }
            for (t, s) in scored.iter().enumerate() {
                let scores: Vec<f64> = s.iter().map(|p| p.0).collect();
                let tp: Vec<bool> = score_order(&scores).into_iter().map(|i| s[i].1).collect();
                per_area[a][t] = Some(interpolated_precision(&tp, n_gt));
            }
        }
        table.push(per_area);
    }
    Ok(table)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn curve_mean(p: &[f64; 101]) -> f64 {
    p.iter().sum::<f64>() / 101.0
}

fn summarize(table: &Table) -> Metrics {
    let over = |area: usize, ts: &[usize]| {
        mean(
            table
                .iter()
                .flat_map(|c| ts.iter().filter_map(move |&t| c[area][t].as_ref()))
                .map(curve_mean),
        )
    };
    let all: Vec<usize> = (0..10).collect();
    Metrics {
        ap: over(0, &all),
        ap50: over(0, &[0]),
        ap75: over(0, &[5]),
        ap_s: over(1, &all),
        ap_m: over(2, &all),
        ap_l: over(3, &all),
    }
}

/// Overall, per-class and per-modality metrics. Image order does not matter:
/// images are processed by ascending id. Only each image's [`MAX_DETS`]
/// best detections count.
pub fn ap_report(
    images: &[EvalImage],
    detections: &[Detection],
    catalog: &Catalog,
    sizes: &SizeThresholds,
) -> Result<ApReport> {
    let mut imgs: Vec<&EvalImage> = images.iter().collect();
    imgs.sort_by_key(|i| i.image_id);
    if let Some(w) = imgs.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::Duplicate(format!("image id {}", w[0].image_id)));
    }
    for img in &imgs {
        ensure!(
            img.modality_id < catalog.num_modalities(),
            Validation,
            "image {}: unknown modality {}",
            img.image_id,
            img.modality_id
        );
        for g in &img.annotations {
            ensure!(g.class_id < catalog.num_classes(), Validation, "image {}: unknown class", img.image_id);
        }
    }
    let mut by_image: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        d.validate()?;
        ensure!(d.class_id < catalog.num_classes(), Validation, "detection class {} unknown", d.class_id);
        ensure!(
            imgs.binary_search_by_key(&d.image_id, |i| i.image_id).is_ok(),
            Validation,
            "detection for unknown image {}",
            d.image_id
        );
        by_image.entry(d.image_id).or_default().push(d);
    }
    for v in by_image.values_mut() {
        let scores: Vec<f64> = v.iter().map(|d| d.score).collect();
        let order = score_order(&scores);
        *v = order.into_iter().take(MAX_DETS).map(|i| v[i]).collect();
    }

    let all_classes: Vec<usize> = (0..catalog.num_classes()).collect();
    let table = evaluate(&imgs, &by_image, &all_classes, sizes)?;
    let overall = summarize(&table);
    let per_class = all_classes
        .iter()
        .zip(&table)
        .map(|(&c, row)| ClassAp {
            class_id: c,
            name: catalog.classes[c].name.clone(),
            n_gt: imgs
                .iter()
                .flat_map(|i| &i.annotations)
                .filter(|g| g.class_id == c)
                .count(),
            ap: mean(row[0].iter().flatten().map(curve_mean)),
            ap50: row[0][0].as_ref().map(curve_mean),
        })
        .collect();
    let pr_curves = all_classes
        .iter()
        .zip(&table)
        .filter_map(|(&c, row)| {
            row[0][0].map(|p| PrCurve {
                class_id: c,
                precision: p.to_vec(),
            })
        })
        .collect();

    let mut per_modality = Vec::with_capacity(catalog.num_modalities());
    for m in 0..catalog.num_modalities() {
        let sub: Vec<&EvalImage> = imgs.iter().copied().filter(|i| i.modality_id == m).collect();
        let classes = catalog.classes_of(m);
        let t = evaluate(&sub, &by_image, &classes, sizes)?;
        per_modality.push(ModalityAp {
            modality_id: m,
            name: catalog.modalities[m].clone(),
            num_images: sub.len(),
            metrics: summarize(&t),
        });
    }
    Ok(ApReport {
        overall,
        per_class,
        per_modality,
        pr_curves,
    })
}
