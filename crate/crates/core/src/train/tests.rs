use super::*;
use crate::data::{DatasetSpec, SplitCounts};
use crate::detector::{load_checkpoint, DetectorConfig};
use crate::error::Error;

fn tiny() -> RunConfig {
    let mut spec = DatasetSpec::default_medical(3);
    spec.image_size = 32;
    spec.object_size = [8, 14];
    spec.counts = SplitCounts { train: 10, val: 5 };
    let classes = spec.catalog().num_classes();
    RunConfig {
        detector: DetectorConfig {
            d_model: 16,
            num_queries: 6,
            decoder_layers: 3,
            heads: 2,
            patch_size: 8,
            encoder_layers: 1,
            ffn_dim: 24,
            num_classes: classes,
            moca: true,
            qra_layer: 3,
        },
        optim: OptimSettings {
            lr: 1e-3,
            epochs: 2,
            decay_epoch: 1,
            steps_per_epoch: Some(2),
            ..OptimSettings::default()
        },
        batch_size: 3,
        seed: 11,
        data: DataSource::Synthetic { spec: Some(spec), seed: 0 },
        tokens: TokenSource::Synthetic { d_text: 8, seed: 1 },
        qra: QraRunSettings {
            tau: 0.5,
            steps: 3,
            lr: None,
        },
        eval_every: 1,
        ..RunConfig::desk()
    }
}

fn validation_lines(e: Error) -> Vec<String> {
    match e {
        Error::Validation(s) => s.lines().map(str::to_owned).collect(),
        other => panic!("expected a validation error, got {other}"),
    }
}

#[test]
fn desk_config_is_valid_and_round_trips() {
    let cfg = RunConfig::desk();
    cfg.validate().unwrap();
    cfg.validate_pretrain().unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    assert_eq!(cfg.optim.schedule().lr(1e-4, 39), 1e-4);
    assert!((cfg.optim.schedule().lr(1e-4, 40) - 1e-5).abs() < 1e-20);
}

#[test]
fn minimal_json_takes_defaults() {
    let cfg = RunConfig::desk();
    let json = serde_json::json!({ "detector": cfg.detector, "batch_size": 5 });
    let parsed: RunConfig = serde_json::from_value(json).unwrap();
    assert_eq!(parsed, cfg);
}

#[test]
fn diagnostics_name_every_bad_field() {
    let mut cfg = RunConfig::desk();
    cfg.optim.lr = -1.0;
    cfg.detector.num_classes += 1;
    cfg.qra.tau = 0.0;
    cfg.batch_size = 0;
    let lines = validation_lines(cfg.validate().unwrap_err());
    for field in ["optim.lr", "detector.num_classes", "qra.tau", "batch_size"] {
        assert!(lines.iter().any(|l| l.contains(field)), "{field} missing from {lines:?}");
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut v = serde_json::to_value(RunConfig::desk()).unwrap();
    v["optim"]["learning_rate"] = serde_json::json!(0.1);
    std::fs::write(&path, v.to_string()).unwrap();
    let msg = validation_lines(RunConfig::from_path(&path).unwrap_err()).join(" ");
    assert!(msg.contains("learning_rate"), "{msg}");
}

#[test]
fn pretraining_rejects_batches_larger_than_modality_count() {
    let mut cfg = RunConfig::desk();
    cfg.batch_size = 6;
    cfg.validate().unwrap();
    let lines = validation_lines(cfg.validate_pretrain().unwrap_err());
    assert!(lines[0].contains("batch_size (6)"));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_pretrain(&cfg, dir.path()), Err(Error::Validation(_))));
    assert!(!dir.path().join(CONFIG_FILE).exists(), "no work before validation");
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_train(&cfg, a.path(), None).unwrap();
    let rb = run_train(&cfg, b.path(), None).unwrap();
    assert_eq!(ra.final_loss.to_bits(), rb.final_loss.to_bits());
    assert_eq!(ra.steps, 4);
    for f in [METRICS_FILE, EVAL_FILE, REPORT_FILE, "checkpoint.json", "checkpoint.f32", CONFIG_FILE] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let metrics = std::fs::read_to_string(&ra.paths.metrics).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "step,epoch,lr,loss,focal,l1,giou");
    assert_eq!(rows.len(), 5);
    assert!(rows[3].starts_with("2,1,0.0001"), "{}", rows[3]);
    let evals = std::fs::read_to_string(ra.paths.eval.unwrap()).unwrap();
    assert_eq!(evals.lines().count(), 3);

    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    run_train(&other, c.path(), None).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("checkpoint.f32")).unwrap(),
        std::fs::read(c.path().join("checkpoint.f32")).unwrap()
    );
}

#[test]
fn moca_off_leaves_projection_untouched() {
    let mut cfg = tiny();
    cfg.detector.moca = false;
    cfg.eval_every = 0;
    let dir = tempfile::tempdir().unwrap();
    let r = run_train(&cfg, dir.path(), None).unwrap();
    assert!(r.final_loss.is_finite());
    let (_, tensors) = load_checkpoint(dir.path(), CHECKPOINT_STEM).unwrap();
    let w = &tensors.iter().find(|(n, _)| n == crate::queryrepa::TOKEN_PROJ_NAME).unwrap().1;
    let mut init = crate::tokens::TokenProjection::init(
        16,
        8,
        &mut rand::SeedableRng::seed_from_u64(cfg.seed_for(Stream::Projection)),
    );
    crate::detector::round_to_f32(&mut init.weight);
    assert_eq!(w, &init.weight);
}

#[test]
fn pretrain_then_zero_epoch_finetune_keeps_weights() {
    let cfg = tiny();
    let pre = tempfile::tempdir().unwrap();
    let out = run_pretrain(&cfg, pre.path()).unwrap();
    assert_eq!(out.steps, 3);
    let (_, pre_tensors) = load_checkpoint(pre.path(), CHECKPOINT_STEM).unwrap();
    assert!(pre_tensors.iter().any(|(n, _)| n.starts_with("align.")));
    let csv = std::fs::read_to_string(&out.paths.metrics).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let mut ft = cfg.clone();
    ft.optim.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let r = run_train(&ft, dir.path(), Some(pre.path())).unwrap();
    assert_eq!(r.steps, 0);
    assert!(r.report.is_some());
    let (_, tensors) = load_checkpoint(dir.path(), CHECKPOINT_STEM).unwrap();
    let kept: Vec<_> = pre_tensors.into_iter().filter(|(n, _)| !n.starts_with("align.")).collect();
    assert_eq!(tensors, kept);

    // A short finetune from the same checkpoint reproduces itself.
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_train(&cfg, a.path(), Some(pre.path())).unwrap();
    run_train(&cfg, b.path(), Some(pre.path())).unwrap();
    assert_eq!(
        std::fs::read(a.path().join("checkpoint.f32")).unwrap(),
        std::fs::read(b.path().join("checkpoint.f32")).unwrap()
    );

    let mut wrong = cfg.clone();
    wrong.detector.num_queries += 1;
    let c = tempfile::tempdir().unwrap();
    assert!(matches!(run_train(&wrong, c.path(), Some(pre.path())), Err(Error::Checkpoint(_))));
}

#[test]
fn eval_reproduces_training_report() {
    let mut cfg = tiny();
    cfg.eval_every = 0;
    let dir = tempfile::tempdir().unwrap();
    let r = run_train(&cfg, dir.path(), None).unwrap();
    let out = dir.path().join("again/report.json");
    let again = run_eval(dir.path(), None, &out).unwrap();
    assert_eq!(Some(again), r.report);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(dir.path().join(REPORT_FILE)).unwrap()
    );
    let table = std::fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert!(table.starts_with("metric,CXR,MRI,"), "{table}");
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn metrics_log_checks_arity() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = MetricsLog::create(&dir.path().join("m.csv"), &["a", "b"]).unwrap();
    log.row(&["1".into(), fmt_f64(0.1)]).unwrap();
    assert!(log.row(&["1".into()]).is_err());
    assert_eq!(std::fs::read_to_string(log.path()).unwrap(), "a,b\n1,0.1\n");
}
