use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor, Var};

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        d_model: 8,
        num_queries: 4,
        decoder_layers: 2,
        heads: 2,
        patch_size: 4,
        encoder_layers: 1,
        ffn_dim: 12,
        num_classes: 3,
        moca: true,
        qra_layer: 2,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::matrix(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_row(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::row((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn run(det: &Detector, image: &Tensor, token: &Tensor, mode: MocaMode) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let t = tape.constant(token.clone());
    let out = det
        .forward(&mut tape, &b, image, Some(t), ForwardOptions::full(mode))
        .unwrap();
    let mut v: Vec<Tensor> = out.states.iter().map(|&s| tape.value(s).clone()).collect();
    for l in &out.layers {
        v.push(tape.value(l.logits).clone());
        v.push(tape.value(l.boxes).clone());
    }
    v
}

#[test]
fn patch_grid_size() {
    let img = Tensor::zeros(32, 32);
    assert_eq!(extract_patches(&img, 8).unwrap().dims(), (16, 64));
    assert!(extract_patches(&Tensor::zeros(30, 32), 8).is_err());
}

#[test]
fn zero_image_memory_is_positional_encoding() {
    let mut cfg = DetectorConfig::desk(2);
    cfg.encoder_layers = 0;
    let det = Detector::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let m = det.memory(&mut tape, &b, &Tensor::zeros(32, 32)).unwrap();
    let pe = sine_position_encoding(4, 4, 64).unwrap();
    assert_eq!(tape.value(m).data(), pe.data());
    assert_ne!(pe.row_slice(0), pe.row_slice(1));
}

#[test]
fn augmented_set_has_token_last() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()).unwrap());
    let t = tape.constant(random_row(&mut rng, 4));
    let aug = moca_augment(&mut tape, q, t).unwrap();
    assert_eq!(tape.dims(aug), (4, 4));
    assert_eq!(tape.value(aug).row_slice(3), tape.value(t).data());
    let bad = tape.constant(random_row(&mut rng, 5));
    assert!(moca_augment(&mut tape, q, bad).is_err());
}

#[test]
fn zero_f_theta_gives_zero_token_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut det = Detector::init(tiny_config(), &mut rng).unwrap();
    let i = det.f_theta_index();
    *det.params_mut().get_mut(i) = Tensor::zeros(8, 8);
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let t = tape.constant(random_row(&mut rng, 8));
    let img = random_image(&mut rng, 8, 8);
    let out = det
        .forward(&mut tape, &b, &img, Some(t), ForwardOptions::full(MocaMode::On))
        .unwrap();
    assert!(tape.value(out.token_row.unwrap()).data().iter().all(|&v| v == 0.0));
    let off = det
        .forward(&mut tape, &b, &img, Some(t), ForwardOptions::full(MocaMode::Off))
        .unwrap();
    assert!(off.token_row.is_none());
}

#[test]
fn uniform_attention_averages_values() {
    let mut tape = Tape::new();
    let zero = |tape: &mut Tape, r, c| tape.constant(Tensor::zeros(r, c));
    let p = AttnVars {
        wq: zero(&mut tape, 2, 2),
        bq: zero(&mut tape, 1, 2),
        wk: zero(&mut tape, 2, 2),
        bk: zero(&mut tape, 1, 2),
        wv: tape.constant(Tensor::identity(2)),
        bv: zero(&mut tape, 1, 2),
        wo: tape.constant(Tensor::identity(2)),
        bo: zero(&mut tape, 1, 2),
    };
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, -2.0]]).unwrap());
    let (out, w) = multi_head_attention(&mut tape, &p, x, x, x, 2, None).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 1.0, 2.0, 1.0]);
    assert_eq!(w.len(), 2);
    assert!(tape.value(w[0]).data().iter().all(|&a| a == 0.5));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let mut c = |tape: &mut Tape, r, k| {
        let t = Tensor::matrix(r, k, (0..r * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        tape.constant(t)
    };
    let p = AttnVars {
        wq: c(&mut tape, 8, 8),
        bq: c(&mut tape, 1, 8),
        wk: c(&mut tape, 8, 8),
        bk: c(&mut tape, 1, 8),
        wv: c(&mut tape, 8, 8),
        bv: c(&mut tape, 1, 8),
        wo: c(&mut tape, 8, 8),
        bo: c(&mut tape, 1, 8),
    };
    let q = c(&mut tape, 5, 8);
    let kv = c(&mut tape, 7, 8);
    let (_, ws) = multi_head_attention(&mut tape, &p, q, kv, kv, 4, None).unwrap();
    for w in ws {
        let a = tape.value(w);
        for r in 0..a.rows() {
            let s: f64 = a.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_token_is_bitwise_plain_decoder() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let det = Detector::init(tiny_config(), &mut rng).unwrap();
        let img = random_image(&mut rng, 8, 8);
        let tok = random_row(&mut rng, 8);
        let off = run(&det, &img, &tok, MocaMode::Off);
        let masked = run(&det, &img, &tok, MocaMode::MaskedToken);
        let on = run(&det, &img, &tok, MocaMode::On);
        for (a, b) in off.iter().zip(&masked) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_ne!(off.last(), on.last());
    }
}

#[test]
fn query_count_preserved_and_boxes_inside_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let det = Detector::init(tiny_config(), &mut rng).unwrap();
    let img = random_image(&mut rng, 8, 8);
    let tok = random_row(&mut rng, 8);
    let mut tape = Tape::new();
    let b = det.bind(&mut tape, false);
    let t = tape.constant(tok);
    let out = det
        .forward(&mut tape, &b, &img, Some(t), ForwardOptions::full(MocaMode::On))
        .unwrap();
    assert_eq!(out.states.len(), 3);
    for s in &out.states {
        assert_eq!(tape.dims(*s), (4, 8));
    }
    for l in &out.layers {
        assert_eq!(tape.dims(l.logits), (4, 3));
        assert!(tape.value(l.boxes).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn token_perturbation_moves_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let det = Detector::init(tiny_config(), &mut rng).unwrap();
    let img = random_image(&mut rng, 8, 8);
    let tok = random_row(&mut rng, 8);
    let mut tok2 = tok.clone();
    tok2.data_mut()[0] += 1e-3;
    let a = run(&det, &img, &tok, MocaMode::On);
    let b = run(&det, &img, &tok2, MocaMode::On);
    assert!(a[2].max_abs_diff(&b[2]) > 0.0);
}

#[test]
fn same_seed_same_predictions() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let det = Detector::init(tiny_config(), &mut rng).unwrap();
        let img = random_image(&mut rng, 8, 8);
        let tok = random_row(&mut rng, 8);
        det.predict(&img, Some(&tok), MocaMode::On).unwrap()
    };
    assert_eq!(build(), build());
}

#[test]
fn missing_token_is_contract_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let det = Detector::init(tiny_config(), &mut rng).unwrap();
    let img = random_image(&mut rng, 8, 8);
    assert!(det.predict(&img, None, MocaMode::On).is_err());
    assert!(det.predict(&img, None, MocaMode::Off).is_ok());
}

#[test]
fn full_model_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let det = Detector::init(tiny_config(), &mut rng).unwrap();
    let img = random_image(&mut rng, 8, 8);
    let tok = random_row(&mut rng, 8);
    let wl: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wb: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut params = det.params().tensors().to_vec();
    params.push(tok);
    let f = |tape: &mut Tape, vars: &[Var]| {
        let (dv, tv) = vars.split_at(vars.len() - 1);
        let b = BoundDetector { vars: dv.to_vec() };
        let out = det.forward(tape, &b, &img, Some(tv[0]), ForwardOptions::full(MocaMode::On))?;
        let mut terms = Vec::new();
        for l in &out.layers {
            let cl = tape.constant(Tensor::matrix(4, 3, wl.clone())?);
            let cb = tape.constant(Tensor::matrix(4, 4, wb.clone())?);
            let a = tape.mul(l.logits, cl)?;
            let bx = tape.mul(l.boxes, cb)?;
            terms.push(tape.sum_all(a));
            terms.push(tape.sum_all(bx));
        }
        let all = tape.concat_rows(&terms)?;
        Ok(tape.sum_all(all))
    };
    let rep = grad_check(f, &params, 1e-5, 1e-4).unwrap();
    assert!(rep.passed, "max rel error {} at {:?}", rep.max_rel_error, rep.worst);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let det = Detector::init(tiny_config(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let header = CheckpointHeader {
        config: det.config().clone(),
        step: 3,
        seeds: [("model".to_string(), 9)].into_iter().collect(),
        extra: serde_json::Value::Null,
    };
    let named: Vec<(String, &Tensor)> = det
        .params()
        .names()
        .iter()
        .cloned()
        .zip(det.params().tensors())
        .collect();
    save_checkpoint(dir.path(), "ckpt", &header, &named).unwrap();
    let (m, tensors) = load_checkpoint(dir.path(), "ckpt").unwrap();
    assert_eq!(m.step, 3);
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let back = Detector::from_tensors(m.config, &names, tensors.into_iter().map(|(_, t)| t).collect()).unwrap();
    for (a, b) in det.params().tensors().iter().zip(back.params().tensors()) {
        let mut a = a.clone();
        round_to_f32(&mut a);
        assert_eq!(&a, b);
    }
    let mut other = tiny_config();
    other.num_queries = 5;
    let (m, tensors) = load_checkpoint(dir.path(), "ckpt").unwrap();
    let _ = m;
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let err = Detector::from_tensors(other, &names, tensors.into_iter().map(|(_, t)| t).collect());
    assert!(matches!(err, Err(crate::Error::Checkpoint(_))));
}
