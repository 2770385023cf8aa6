use super::Detection;
use crate::data::{cxcywh_to_xyxy, Annotation};
use crate::error::{ensure, Result};
use crate::losses::iou;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Flag {
    Tp,
    Fp,
    Ignored,
}

/// Indices of `scores` in descending order, ties kept in input order.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy matching of one image's detections of one class, given in
/// descending score order. Ground truths carry an ignore flag; detections
/// carry an out-of-range flag used when they stay unmatched. A detection
/// prefers the best non-ignored ground truth and falls back to ignored ones.
pub(crate) fn match_sorted(dets: &[([f64; 4], bool)], gts: &[([f64; 4], bool)], thr: f64) -> Result<Vec<Flag>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &(d, out_of_range) in dets {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, &(gb, ign)) in gts.iter().enumerate() {
                if taken[g] || ign != pass_ignored {
                    continue;
                }
                let v = iou(d, gb)?;
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if best.is_some() {
                break;
            }
        }
        out.push(match best {
            Some((g, _)) => {
                taken[g] = true;
                if gts[g].1 {
                    Flag::Ignored
                } else {
                    Flag::Tp
                }
            }
            None if out_of_range => Flag::Ignored,
            None => Flag::Fp,
        });
    }
    Ok(out)
}

/// TP flags for one image, in the input order of `dets`. Each detection only
/// competes for ground truths of its own class.
pub fn match_and_score(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> Result<Vec<bool>> {
    for d in dets {
        d.validate()?;
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = score_order(&scores);
    let mut flags = vec![false; dets.len()];
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let idx: Vec<usize> = order.iter().copied().filter(|&i| dets[i].class_id == c).collect();
        let ds: Vec<([f64; 4], bool)> = idx.iter().map(|&i| (cxcywh_to_xyxy(dets[i].bbox), false)).collect();
        let gs: Vec<([f64; 4], bool)> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| (g.xyxy(), false))
            .collect();
        for (k, f) in match_sorted(&ds, &gs, iou_threshold)?.into_iter().enumerate() {
            flags[idx[k]] = f == Flag::Tp;
        }
    }
    Ok(flags)
}

/// 101-point interpolated precision for TP flags already in score order.
pub(crate) fn interpolated_precision(tp_sorted: &[bool], n_gt: usize) -> [f64; 101] {
    let mut prec = Vec::with_capacity(tp_sorted.len());
    let mut rec = Vec::with_capacity(tp_sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in tp_sorted {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (1..prec.len()).rev() {
        if prec[i] > prec[i - 1] {
            prec[i - 1] = prec[i];
        }
    }
    std::array::from_fn(|r| {
        let target = r as f64 / 100.0;
        let pos = rec.partition_point(|&x| x < target);
        prec.get(pos).copied().unwrap_or(0.0)
    })
}

/// 101-point interpolated AP of scored TP flags against `n_gt` ground truths;
/// `None` when `n_gt = 0`.
pub fn average_precision(tp: &[bool], scores: &[f64], n_gt: usize) -> Result<Option<f64>> {
    ensure!(tp.len() == scores.len(), Dimension, "{} flags vs {} scores", tp.len(), scores.len());
    ensure!(scores.iter().all(|s| s.is_finite()), Validation, "non-finite score");
    if n_gt == 0 {
        return Ok(None);
    }
    let sorted: Vec<bool> = score_order(scores).into_iter().map(|i| tp[i]).collect();
    let p = interpolated_precision(&sorted, n_gt);
    Ok(Some(p.iter().sum::<f64>() / 101.0))
}
