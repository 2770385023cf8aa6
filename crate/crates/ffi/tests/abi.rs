use std::ffi::{CStr, CString};
use std::ptr;

use modalign::data::{DatasetSpec, SplitCounts};
use modalign::detector::DetectorConfig;
use modalign::train::{run_train, DataSource, OptimSettings, RunConfig, TokenSource};
use modalign_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; ma_last_error_length()];
    assert_eq!(unsafe { ma_last_error(buf.as_mut_ptr(), buf.len()) }, MaStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn tiny_run(dir: &std::path::Path, moca: bool) {
    let mut spec = DatasetSpec::default_medical(1);
    spec.image_size = 32;
    spec.object_size = [8, 14];
    spec.counts = SplitCounts { train: 5, val: 5 };
    let classes = spec.catalog().num_classes();
    let cfg = RunConfig {
        detector: DetectorConfig {
            d_model: 16,
            num_queries: 4,
            decoder_layers: 2,
            heads: 2,
            patch_size: 8,
            encoder_layers: 1,
            ffn_dim: 16,
            num_classes: classes,
            moca,
            qra_layer: 2,
        },
        optim: OptimSettings {
            epochs: 1,
            steps_per_epoch: Some(1),
            ..OptimSettings::default()
        },
        batch_size: 2,
        data: DataSource::Synthetic { spec: Some(spec), seed: 0 },
        tokens: TokenSource::Synthetic { d_text: 8, seed: 0 },
        ..RunConfig::desk()
    };
    run_train(&cfg, dir, None).unwrap();
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ma_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_and_bad_arguments_report_status_and_message() {
    let mut out = 0.0;
    assert_eq!(unsafe { ma_iou(ptr::null(), ptr::null(), &mut out) }, MaStatus::NullArgument);
    assert!(last_error().contains("a is null"));

    let a = [0.0, 0.0, 1.0, 1.0];
    let degenerate = [0.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { ma_iou(a.as_ptr(), degenerate.as_ptr(), &mut out) }, MaStatus::Validation);
    assert!(!last_error().is_empty());

    let b = [0.5, 0.0, 1.5, 1.0];
    assert_eq!(unsafe { ma_iou(a.as_ptr(), b.as_ptr(), &mut out) }, MaStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(last_error(), "");

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/run").unwrap();
    assert_eq!(unsafe { ma_model_load(missing.as_ptr(), &mut model) }, MaStatus::Io);
    assert!(model.is_null());
    unsafe { ma_model_free(ptr::null_mut()) };

    let mut tiny = [0 as std::ffi::c_char; 1];
    set_some_error();
    assert_eq!(unsafe { ma_last_error(tiny.as_mut_ptr(), 1) }, MaStatus::BufferTooSmall);
}

fn set_some_error() {
    let mut out = 0.0;
    unsafe { ma_exact_mi(ptr::null(), 1, 1, &mut out) };
}

#[test]
fn bound_functions_match_closed_forms() {
    // Identity coupling on two symbols: I = ln 2.
    let p = [0.5, 0.0, 0.0, 0.5];
    let mut mi = 0.0;
    assert_eq!(unsafe { ma_exact_mi(p.as_ptr(), 2, 2, &mut mi) }, MaStatus::Ok);
    assert!((mi - 2f64.ln()).abs() < 1e-15);
    let mut bound = 0.0;
    assert_eq!(unsafe { ma_infonce_exact_bound(p.as_ptr(), 2, 2, 1, &mut bound) }, MaStatus::Ok);
    // K = 1: the negative repeats the positive with probability 1/2.
    let want = 2f64.ln() - 0.5 * 2f64.ln();
    assert!((bound - want).abs() < 1e-12, "{bound} vs {want}");
    assert!(bound <= mi);

    let bad = [0.5, 0.6, 0.0, 0.0];
    assert_eq!(unsafe { ma_exact_mi(bad.as_ptr(), 2, 2, &mut mi) }, MaStatus::Validation);
}

#[test]
fn registry_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path(), true);
    let path = CString::new(dir.path().join("tokens.json").to_str().unwrap()).unwrap();
    let mut reg = ptr::null_mut();
    assert_eq!(unsafe { ma_registry_load(path.as_ptr(), &mut reg) }, MaStatus::Ok);
    let (mut d, mut n) = (0, 0);
    assert_eq!(unsafe { ma_registry_dims(reg, &mut d, &mut n) }, MaStatus::Ok);
    assert_eq!(d, 8);
    assert!(n > 0);

    let m = CString::new("CXR").unwrap();
    let c = CString::new("Cardiomegaly").unwrap();
    let mut v = vec![0.0; d];
    assert_eq!(unsafe { ma_registry_get(reg, m.as_ptr(), c.as_ptr(), v.as_mut_ptr(), d) }, MaStatus::Ok);
    assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(
        unsafe { ma_registry_get(reg, m.as_ptr(), c.as_ptr(), v.as_mut_ptr(), d - 1) },
        MaStatus::BufferTooSmall
    );
    let unknown = CString::new("nope").unwrap();
    assert_eq!(
        unsafe { ma_registry_get(reg, m.as_ptr(), unknown.as_ptr(), v.as_mut_ptr(), d) },
        MaStatus::Validation
    );
    unsafe { ma_registry_free(reg) };
}

#[test]
fn model_predicts_like_the_library() {
    for moca in [true, false] {
        let dir = tempfile::tempdir().unwrap();
        tiny_run(dir.path(), moca);
        let run = CString::new(dir.path().to_str().unwrap()).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(unsafe { ma_model_load(run.as_ptr(), &mut model) }, MaStatus::Ok);
        let (mut nq, mut nc, mut dm) = (0, 0, 0);
        assert_eq!(unsafe { ma_model_dims(model, &mut nq, &mut nc, &mut dm) }, MaStatus::Ok);
        assert_eq!((nq, dm), (4, 16));

        let image: Vec<f64> = (0..32 * 32).map(|i| (i % 7) as f64 / 7.0).collect();
        let modality = CString::new("MRI").unwrap();
        let mut probs = vec![0.0; nq * nc];
        let mut boxes = vec![0.0; nq * 4];
        let status = unsafe {
            ma_model_predict(
                model,
                image.as_ptr(),
                32,
                32,
                modality.as_ptr(),
                probs.as_mut_ptr(),
                probs.len(),
                boxes.as_mut_ptr(),
                boxes.len(),
            )
        };
        assert_eq!(status, MaStatus::Ok, "{}", last_error());
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

        // Same numbers through the library.
        let (det, proj, _) = modalign::queryrepa::load_model(dir.path(), "checkpoint").unwrap();
        let reg = modalign::tokens::TokenRegistry::load(dir.path().join("tokens.json")).unwrap();
        let img = modalign::autodiff::Tensor::matrix(32, 32, image.clone()).unwrap();
        let token = moca.then(|| {
            let catalog = DatasetSpec::default_medical(1).catalog();
            let sample = modalign::data::Sample {
                sample_id: 0,
                image: img.clone(),
                modality_id: catalog.modality_index("MRI").unwrap(),
                annotations: vec![],
            };
            modalign::data::attach_token(&sample, &catalog, &reg, &proj, modalign::data::TokenMode::Inference)
                .unwrap()
                .1
        });
        let (p, b) = det.predict(&img, token.as_ref(), det.default_mode()).unwrap();
        assert_eq!(p.data(), &probs[..]);
        assert_eq!(b.data(), &boxes[..]);

        let short = unsafe {
            ma_model_predict(
                model,
                image.as_ptr(),
                32,
                32,
                modality.as_ptr(),
                probs.as_mut_ptr(),
                probs.len() - 1,
                boxes.as_mut_ptr(),
                boxes.len(),
            )
        };
        assert_eq!(short, MaStatus::BufferTooSmall);
        if moca {
            let missing = unsafe {
                ma_model_predict(
                    model,
                    image.as_ptr(),
                    32,
                    32,
                    ptr::null(),
                    probs.as_mut_ptr(),
                    probs.len(),
                    boxes.as_mut_ptr(),
                    boxes.len(),
                )
            };
            assert_eq!(missing, MaStatus::NullArgument);
        }
        unsafe { ma_model_free(model) };
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/modalign.h")).unwrap();
    for f in [
        "ma_version",
        "ma_last_error_length",
        "ma_last_error(",
        "ma_model_load",
        "ma_model_free",
        "ma_model_dims",
        "ma_model_predict",
        "ma_registry_load",
        "ma_registry_free",
        "ma_registry_dims",
        "ma_registry_get",
        "ma_iou",
        "ma_exact_mi",
        "ma_infonce_exact_bound",
        "typedef struct MaModel MaModel",
        "MA_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}
