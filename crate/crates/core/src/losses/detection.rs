use serde::{Deserialize, Serialize};

use super::box_ops::giou_on_tape;
use super::hungarian::{hungarian, CostMatrix, Matching};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{cxcywh_to_xyxy, Annotation};
use crate::detector::LayerOutput;
use crate::error::{ensure, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub focal: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.focal", self.focal),
            ("loss.focal_alpha", self.focal_alpha),
            ("loss.focal_gamma", self.focal_gamma),
            ("loss.l1", self.l1),
            ("loss.giou", self.giou),
        ] {
            ensure!(v.is_finite() && v >= 0.0, Validation, "{name} must be non-negative, got {v}");
        }
        ensure!(self.focal_alpha <= 1.0, Validation, "loss.focal_alpha must be <= 1");
        Ok(())
    }
}

/// `−α_t (1 − p_t)^γ ln p_t` on a probability.
pub fn focal_loss(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let (pt, at) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Per-pair matching cost `w_f · (pos − neg) + w_1 · ‖b − b̂‖₁ + w_g · (1 − GIoU)`
/// where `pos`/`neg` are the focal terms for target 1 and 0 at the GT class.
/// `probs` is `N × C`, `boxes` `N × 4` (`cxcywh`).
pub fn build_cost_matrix(
    probs: &Tensor,
    boxes: &Tensor,
    gts: &[Annotation],
    w: &LossWeights,
) -> Result<CostMatrix> {
    let (n, c) = probs.dims();
    ensure!(boxes.dims() == (n, 4), Dimension, "boxes {:?} vs {n} queries", boxes.dims());
    let mut data = Vec::with_capacity(n * gts.len());
    for q in 0..n {
        let pb = boxes.row_slice(q);
        let pb = [pb[0], pb[1], pb[2], pb[3]];
        for g in gts {
            ensure!(g.class_id < c, Dimension, "class {} >= {c}", g.class_id);
            let p = probs.get(q, g.class_id);
            let cls = focal_loss(p, true, w.focal_alpha, w.focal_gamma)
                - focal_loss(p, false, w.focal_alpha, w.focal_gamma);
            let l1: f64 = pb.iter().zip(&g.bbox).map(|(a, b)| (a - b).abs()).sum();
            let gi = super::box_ops::giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(g.bbox))?;
            data.push(w.focal * cls + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    CostMatrix::new(n, gts.len(), data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub matchings: Vec<Matching>,
}

/// Set-prediction loss summed over layers (deep supervision) and divided by
/// `max(1, G)`. Matching per layer uses the current values; unmatched queries
/// get all-zero class targets.
pub fn detection_loss(
    tape: &mut Tape,
    layers: &[LayerOutput],
    gts: &[Annotation],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    ensure!(!layers.is_empty(), Contract, "no layer outputs");
    let norm = gts.len().max(1) as f64;
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    for l in layers {
        let (n, c) = tape.dims(l.logits);
        let probs = Tensor::raw(
            vec![n, c],
            tape.value(l.logits).data().iter().map(|&x| sigmoid(x)).collect(),
        );
        let cost = build_cost_matrix(&probs, tape.value(l.boxes), gts, w)?;
        let m = hungarian(&cost)?;

        let mut targets = vec![0.0; n * c];
        for &(q, g) in &m.pairs {
            targets[q * c + gts[g].class_id] = 1.0;
        }
        let fl = tape.sigmoid_focal(l.logits, &targets, w.focal_alpha, w.focal_gamma)?;
        let fl = tape.sum_all(fl);
        br.focal += tape.value(fl).item() / norm;
        terms.push(tape.scale(fl, w.focal / norm));

        if !m.pairs.is_empty() {
            let rows = m
                .pairs
                .iter()
                .map(|&(q, _)| tape.slice_rows(l.boxes, q, 1))
                .collect::<Result<Vec<_>>>()?;
            let pred = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
            let tgt: Vec<Vec<f64>> = m.pairs.iter().map(|&(_, g)| gts[g].bbox.to_vec()).collect();
            let tgt = tape.constant(Tensor::from_rows(&tgt)?);
            let diff = tape.sub(pred, tgt)?;
            let ad = tape.abs(diff);
            let l1 = tape.sum_all(ad);
            br.l1 += tape.value(l1).item() / norm;
            terms.push(tape.scale(l1, w.l1 / norm));

            let g = giou_on_tape(tape, pred, tgt)?;
            let gs = tape.sum_all(g);
            let k = m.pairs.len() as f64;
            let neg = tape.neg(gs);
            let gl = tape.add_scalar(neg, k);
            br.giou += tape.value(gl).item() / norm;
            terms.push(tape.scale(gl, w.giou / norm));
        }
        br.matchings.push(m);
    }
    let stacked = if terms.len() == 1 { terms[0] } else { tape.concat_rows(&terms)? };
    let total = tape.sum_all(stacked);
    br.total = tape.value(total).item();
    Ok((total, br))
}
