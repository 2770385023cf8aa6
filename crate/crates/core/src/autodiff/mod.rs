//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::focal_elem;

/// Layer-norm variance epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ia = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = t.constant(m(&[&[1.0], &[1.0]]));
        let p = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 7.0]);

        let z = t.constant(Tensor::zeros(2, 2));
        let za = t.matmul(z, a).unwrap();
        assert!(t.value(za).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(1, 4));
        let s = t.softmax_rows(z, 1.0).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = t.constant(Tensor::row(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = t.softmax_rows(x, 1.0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in t.value(s).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }

        let empty = t.constant(Tensor::zeros(2, 0));
        assert!(matches!(t.softmax_rows(empty, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn kink_margin_sees_only_gradient_paths() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row(vec![0.0, 3.0]));
        tape.relu(c);
        assert_eq!(tape.kink_margin(), f64::INFINITY);
        let p = tape.param(Tensor::row(vec![-0.5, 0.25]));
        tape.relu(p);
        assert_eq!(tape.kink_margin(), 0.25);
        let b = tape.constant(Tensor::scalar(0.3));
        tape.maximum(p, b).unwrap();
        assert!((tape.kink_margin() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_column() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let s = t
            .masked_softmax_rows(x, 1.0, Some(&[false, false, true]))
            .unwrap();
        let v = t.value(s).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![0.3, -2.0, 5.0]));
        let nv = t.neg(v);
        let same = t.cosine_sim(v, v).unwrap();
        let anti = t.cosine_sim(v, nv).unwrap();
        assert!((t.value(same).item() - 1.0).abs() < 1e-15);
        assert!((t.value(anti).item() + 1.0).abs() < 1e-15);
        let z = t.constant(Tensor::zeros(1, 3));
        assert!(matches!(t.cosine_sim(v, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::filled(2, 5, 3.7));
        let y = t.layernorm_rows(c, LAYERNORM_EPS);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_map() {
        let mut t = Tape::new();
        let w = t.param(m(&[&[0.1, 0.2, 0.3], &[-1.0, 0.5, 2.0]]));
        let x = t.constant(m(&[&[1.0], &[-2.0], &[4.0]]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        let gw = g.get(w).unwrap();
        assert_eq!(gw.data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_squared_norm() {
        let mut t = Tape::new();
        let v = t.param(Tensor::row(vec![1.5, -0.5, 2.0]));
        let sq = t.mul(v, v).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap().get(v).unwrap();
        assert_eq!(g.data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut t = Tape::new();
        let v = t.param(Tensor::scalar(2.0));
        let loss = t.exp(v);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let v = t.param(Tensor::row(vec![1.0, 2.0]));
        let y = t.exp(v);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_sigmoid_closed_form() {
        // f(w) = σ(w·x) at w = 0.3, x = 1.
        let rep = grad_check(
            |t, p| {
                let x = t.constant(Tensor::scalar(1.0));
                let wx = t.mul(p[0], x)?;
                Ok(t.sigmoid(wx))
            },
            &[Tensor::scalar(0.3)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");

        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(0.3));
        let y = t.sigmoid(w);
        let g = t.backward(y).unwrap().get(w).unwrap().item();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((g - s * (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn grad_check_constant_function() {
        let rep = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[Tensor::row(vec![1.0, 2.0])],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let res = grad_check(
            |t, p| {
                calls.set(calls.get() + 1.0);
                let c = t.constant(Tensor::scalar(calls.get()));
                t.add(p[0], c)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let res = grad_check(|t, p| Ok(t.sum_all(p[0])), &[Tensor::scalar(1.0)], 1e-2, 1e-4);
        assert!(matches!(res, Err(Error::Validation(_))));
    }
}
