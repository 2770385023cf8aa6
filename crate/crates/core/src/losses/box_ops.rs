use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};

pub(crate) fn check_xyxy(b: [f64; 4]) -> Result<()> {
    ensure!(
        b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1],
        Validation,
        "degenerate box {b:?}"
    );
    Ok(())
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union of two `xyxy` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_xyxy(a)?;
    check_xyxy(b)?;
    let inter = intersection(a, b);
    Ok(inter / (area(a) + area(b) - inter))
}

/// Generalized IoU of two `xyxy` boxes, in `[-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_xyxy(a)?;
    check_xyxy(b)?;
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(inter / union - (hull - union) / hull)
}

/// Corners of `k × 4` `cxcywh` boxes as four `k × 1` columns.
fn corners(tape: &mut Tape, b: Var) -> Result<[Var; 4]> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 1)?;
    let w = tape.slice_cols(b, 2, 1)?;
    let h = tape.slice_cols(b, 3, 1)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
}

/// Row-wise GIoU of two `k × 4` `cxcywh` tensors, as a `k × 1` column.
pub fn giou_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let [ax0, ay0, ax1, ay1] = corners(tape, a)?;
    let [bx0, by0, bx1, by1] = corners(tape, b)?;
    let area = |tape: &mut Tape, x0, y0, x1, y1| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        tape.mul(w, h)
    };
    let area_a = area(tape, ax0, ay0, ax1, ay1)?;
    let area_b = area(tape, bx0, by0, bx1, by1)?;

    let ix0 = tape.maximum(ax0, bx0)?;
    let iy0 = tape.maximum(ay0, by0)?;
    let ix1 = tape.minimum(ax1, bx1)?;
    let iy1 = tape.minimum(ay1, by1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;

    let hx0 = tape.minimum(ax0, bx0)?;
    let hy0 = tape.minimum(ay0, by0)?;
    let hx1 = tape.maximum(ax1, bx1)?;
    let hy1 = tape.maximum(ay1, by1)?;
    let hull = area(tape, hx0, hy0, hx1, hy1)?;

    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let pen = tape.div(gap, hull)?;
    tape.sub(iou, pen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn giou_fixtures() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(giou(a, a).unwrap(), 1.0);
        let g = giou(a, [2.0, 2.0, 3.0, 3.0]).unwrap();
        assert!((g - (-7.0 / 9.0)).abs() < 1e-12);
        let b = [0.5, 0.2, 1.7, 0.9];
        assert_eq!(giou(a, b).unwrap(), giou(b, a).unwrap());
        assert!(giou(a, [1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(a, a).unwrap(), 1.0);
        assert_eq!(iou(a, [5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
        assert!((iou(a, [1.0, 0.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tape_giou_matches_scalar() {
        let a = [[0.5, 0.5, 0.4, 0.2], [0.3, 0.6, 0.2, 0.3]];
        let b = [[0.55, 0.45, 0.3, 0.3], [0.8, 0.2, 0.1, 0.1]];
        let mut tape = Tape::new();
        let ta = tape.constant(Tensor::from_rows(&a.map(|r| r.to_vec())).unwrap());
        let tb = tape.constant(Tensor::from_rows(&b.map(|r| r.to_vec())).unwrap());
        let g = giou_on_tape(&mut tape, ta, tb).unwrap();
        for i in 0..2 {
            let xy = |r: [f64; 4]| [r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0];
            let want = giou(xy(a[i]), xy(b[i])).unwrap();
            assert!((tape.value(g).data()[i] - want).abs() < 1e-14);
        }
    }
}
