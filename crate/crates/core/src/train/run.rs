use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunData, Stream};
use super::metrics::{fmt_f64, fmt_opt, MetricsLog};
use crate::autodiff::{Tape, Tensor};
use crate::data::{attach_token, load_dataset, select_token, token_on_tape, Catalog, Sample, TokenMode};
use crate::detector::{round_to_f32, save_checkpoint, CheckpointHeader, Detector, ForwardOptions, MocaMode, ParamSet};
use crate::error::{ensure, Error, Result};
use crate::eval::{ap_report, top_detections, ApReport, EvalImage, SizeThresholds, MAX_DETS};
use crate::losses::detection_loss;
use crate::optim::AdamW;
use crate::queryrepa::{
    finetune_from_checkpoint, load_model, pretrain_step, AlignmentHead, PretrainModel, TOKEN_PROJ_NAME,
};
use crate::tokens::{TokenProjection, TokenRegistry};

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.csv";

/// Files written by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    pub config: PathBuf,
    pub tokens: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub steps: usize,
    pub final_loss: f64,
    pub report: Option<ApReport>,
    pub paths: RunPaths,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn prepare(cfg: &RunConfig, out: &Path, pretrain: bool) -> Result<(RunData, TokenRegistry)> {
    if pretrain {
        cfg.validate_pretrain()?;
    } else {
        cfg.validate()?;
    }
    let data = cfg.data.load()?;
    cfg.validate_against(&data.catalog, pretrain)?;
    ensure!(!data.train.is_empty(), Validation, "data: training split is empty");
    let registry = cfg.tokens.load(&data.catalog)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    registry.save(out.join(TOKENS_FILE))?;
    Ok((data, registry))
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    m.insert("seed".to_string(), cfg.seed);
    for s in Stream::ALL {
        m.insert(s.name().to_string(), cfg.seed_for(s));
    }
    m
}

fn save(cfg: &RunConfig, out: &Path, step: usize, names: &[String], tensors: &[&Tensor], kind: &str) -> Result<PathBuf> {
    let header = CheckpointHeader {
        config: cfg.detector.clone(),
        step: step as u64,
        seeds: seeds(cfg),
        extra: serde_json::json!({ "kind": kind }),
    };
    let pairs: Vec<(String, &Tensor)> = names.iter().cloned().zip(tensors.iter().copied()).collect();
    save_checkpoint(out, CHECKPOINT_STEM, &header, &pairs)?;
    Ok(out.join(format!("{CHECKPOINT_STEM}.json")))
}

/// Alignment pretraining on modality-distinct batches. Writes the config
/// echo, the token registry, `metrics.csv` (`step,epoch,lr,loss,rank1`) and a
/// checkpoint holding the detector, `W` and `g_φ`.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let (data, registry) = prepare(cfg, out, true)?;
    let settings = cfg.qra.settings(&cfg.detector);
    let detector = Detector::init(cfg.detector.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Init)))?;
    let projection = TokenProjection::init(
        cfg.detector.d_model,
        registry.d_text(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Projection)),
    );
    let head = AlignmentHead::init(cfg.detector.d_model, &mut ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Head)));
    let mut model = PretrainModel::new(detector, projection, head)?;
    let shapes: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let mut opt = AdamW::for_params(cfg.optim.adamw(), &shapes);
    let lr = cfg.qra.lr.unwrap_or(cfg.optim.lr);

    let m = data.catalog.num_modalities();
    let mut sampler = crate::data::ModalityBatchSampler::new(&data.train, m, cfg.batch_size, cfg.seed_for(Stream::Order), false)?;
    let mut draw = ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::TokenDraw));
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);

    let metrics_path = out.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics_path, &["step", "epoch", "lr", "loss", "rank1"])?;
    let mut last = f64::NAN;
    for step in 0..cfg.qra.steps {
        let batch = sampler.next_batch();
        ensure!(batch.is_modality_distinct(), Contract, "sampler produced a repeated modality");
        let samples: Vec<&Sample> = batch.indices.iter().map(|&i| &data.train[i]).collect();
        let r = pretrain_step(&mut model, &mut opt, lr, &samples, &data.catalog, &registry, &mut draw, &settings)?;
        last = r.loss;
        log.row(&[
            step.to_string(),
            (step / per_epoch).to_string(),
            fmt_f64(lr),
            fmt_f64(r.loss),
            fmt_f64(r.rank1),
        ])?;
    }
    for t in model.tensors_mut() {
        round_to_f32(t);
    }
    let names = model.names();
    let checkpoint = save(cfg, out, cfg.qra.steps, &names, &model.tensors(), "pretrain")?;
    Ok(RunOutcome {
        steps: cfg.qra.steps,
        final_loss: last,
        report: None,
        paths: RunPaths {
            config: out.join(CONFIG_FILE),
            tokens: out.join(TOKENS_FILE),
            metrics: metrics_path,
            checkpoint,
            eval: None,
            report: None,
            table: None,
        },
    })
}

/// Detection training. MoCA follows `cfg.detector.moca`; with `from_pretrain`
/// the detector and `W` start from a pretraining checkpoint directory.
/// Writes the config echo, token registry, `metrics.csv`
/// (`step,epoch,lr,loss,focal,l1,giou`), `eval.csv` (one row per evaluated
/// epoch count), the checkpoint, `report.json` and `report.csv`. Zero epochs
/// only re-export and evaluate the starting model.
pub fn run_train(cfg: &RunConfig, out: &Path, from_pretrain: Option<&Path>) -> Result<RunOutcome> {
    let (data, registry) = prepare(cfg, out, false)?;
    let (mut detector, mut projection) = match from_pretrain {
        Some(dir) => {
            let (d, p, _) = finetune_from_checkpoint(dir, CHECKPOINT_STEM, &cfg.detector)?;
            ensure!(
                p.d_text() == registry.d_text(),
                Checkpoint,
                "pretrained token projection expects d_text {}, registry has {}",
                p.d_text(),
                registry.d_text()
            );
            (d, p)
        }
        None => (
            Detector::init(cfg.detector.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Init)))?,
            TokenProjection::init(
                cfg.detector.d_model,
                registry.d_text(),
                &mut ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Projection)),
            ),
        ),
    };
    let mode = detector.default_mode();
    let moca = mode != MocaMode::Off;
    let mut shapes: Vec<Tensor> = detector.params().tensors().to_vec();
    if moca {
        shapes.push(projection.weight.clone());
    }
    let mut opt = AdamW::for_params(cfg.optim.adamw(), &shapes);
    let schedule = cfg.optim.schedule();
    let b = cfg.batch_size.min(data.train.len());
    let per_epoch = cfg.optim.steps_per_epoch.unwrap_or(data.train.len().div_ceil(b));

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::Order));
    let mut draw = ChaCha8Rng::seed_from_u64(cfg.seed_for(Stream::TokenDraw));
    let mut queue: Vec<usize> = Vec::new();
    let mut next_index = |rng: &mut ChaCha8Rng| {
        if queue.is_empty() {
            queue = (0..data.train.len()).collect();
            queue.shuffle(rng);
            queue.reverse();
        }
        queue.pop().expect("non-empty training split")
    };

    let metrics_path = out.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics_path, &["step", "epoch", "lr", "loss", "focal", "l1", "giou"])?;
    let eval_path = out.join(EVAL_FILE);
    let mut eval_log = MetricsLog::create(&eval_path, &["epoch", "ap", "ap50", "ap75"])?;
    let eval_row = |log: &mut MetricsLog, epoch: usize, r: &ApReport| {
        log.row(&[
            epoch.to_string(),
            fmt_opt(r.overall.ap),
            fmt_opt(r.overall.ap50),
            fmt_opt(r.overall.ap75),
        ])
    };

    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..cfg.optim.epochs {
        let lr = schedule.lr(cfg.optim.lr, epoch);
        for _ in 0..per_epoch {
            let batch: Vec<usize> = (0..b).map(|_| next_index(&mut order_rng)).collect();
            let mut tape = Tape::new();
            let bound = detector.bind(&mut tape, true);
            let w = moca.then(|| tape.param(projection.weight.clone()));
            let mut losses = Vec::with_capacity(b);
            let (mut focal, mut l1, mut giou) = (0.0, 0.0, 0.0);
            for &i in &batch {
                let s = &data.train[i];
                let token = match w {
                    Some(w) => {
                        let sel = select_token(s, &data.catalog, &registry, TokenMode::Train(&mut draw))?;
                        Some(token_on_tape(&mut tape, w, &registry, &sel)?)
                    }
                    None => None,
                };
                let fwd = detector.forward(&mut tape, &bound, &s.image, token, ForwardOptions::full(mode))?;
                let (loss, br) = detection_loss(&mut tape, &fwd.layers, &s.annotations, &cfg.loss)?;
                focal += br.focal;
                l1 += br.l1;
                giou += br.giou;
                losses.push(loss);
            }
            let stacked = if losses.len() == 1 {
                losses[0]
            } else {
                tape.concat_rows(&losses)?
            };
            let sum = tape.sum_all(stacked);
            let loss = tape.scale(sum, 1.0 / b as f64);
            last = tape.value(loss).item();
            ensure!(last.is_finite(), Numerical, "loss is {last} at step {step}");
            let grads = tape.backward(loss)?;
            let mut vars = bound.vars.clone();
            vars.extend(w);
            let grads = ParamSet::gradients(&vars, &grads);
            let mut params: Vec<&mut Tensor> = detector.params_mut().tensors_mut().iter_mut().collect();
            if moca {
                params.push(&mut projection.weight);
            }
            opt.step(&mut params, &grads, lr)?;
            let n = b as f64;
            log.row(&[
                step.to_string(),
                epoch.to_string(),
                fmt_f64(lr),
                fmt_f64(last),
                fmt_f64(focal / n),
                fmt_f64(l1 / n),
                fmt_f64(giou / n),
            ])?;
            step += 1;
        }
        let done = epoch + 1 == cfg.optim.epochs;
        if !done && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !data.val.is_empty() {
            let mut snapshot = detector.clone();
            snapshot.params_mut().tensors_mut().iter_mut().for_each(round_to_f32);
            let mut proj = projection.clone();
            round_to_f32(&mut proj.weight);
            let r = evaluate(&snapshot, &proj, &registry, &data.catalog, &data.val)?;
            eval_row(&mut eval_log, epoch + 1, &r)?;
        }
    }

    detector.params_mut().tensors_mut().iter_mut().for_each(round_to_f32);
    round_to_f32(&mut projection.weight);
    let mut names = detector.params().names().to_vec();
    names.push(TOKEN_PROJ_NAME.into());
    let mut tensors: Vec<&Tensor> = detector.params().tensors().iter().collect();
    tensors.push(&projection.weight);
    let checkpoint = save(cfg, out, step, &names, &tensors, "train")?;

    let (report, report_path, table_path) = if data.val.is_empty() {
        (None, None, None)
    } else {
        let r = evaluate(&detector, &projection, &registry, &data.catalog, &data.val)?;
        eval_row(&mut eval_log, cfg.optim.epochs, &r)?;
        let rp = out.join(REPORT_FILE);
        write_json(&rp, &r)?;
        let tp = out.join(TABLE_FILE);
        std::fs::write(&tp, report_table(&r)).map_err(|e| Error::io(&tp, e))?;
        (Some(r), Some(rp), Some(tp))
    };
    Ok(RunOutcome {
        steps: step,
        final_loss: last,
        report,
        paths: RunPaths {
            config: out.join(CONFIG_FILE),
            tokens: out.join(TOKENS_FILE),
            metrics: metrics_path,
            checkpoint,
            eval: Some(eval_path),
            report: report_path,
            table: table_path,
        },
    })
}

/// Val-split report. Inference tokens average every class declared for the
/// image's modality; the projection is ignored when MoCA is off.
pub fn evaluate(
    detector: &Detector,
    projection: &TokenProjection,
    registry: &TokenRegistry,
    catalog: &Catalog,
    samples: &[Sample],
) -> Result<ApReport> {
    let mode = detector.default_mode();
    let mut dets = Vec::new();
    for s in samples {
        let token = if mode == MocaMode::Off {
            None
        } else {
            Some(attach_token(s, catalog, registry, projection, TokenMode::Inference)?.1)
        };
        let (probs, boxes) = detector.predict(&s.image, token.as_ref(), mode)?;
        dets.extend(top_detections(s.sample_id, &probs, &boxes, MAX_DETS)?);
    }
    let images: Vec<EvalImage> = samples.iter().map(EvalImage::from).collect();
    ap_report(&images, &dets, catalog, &SizeThresholds::default())
}

/// Rows `ap`, `ap50`, `ap75`; one column per modality, then `total`.
pub fn report_table(r: &ApReport) -> String {
    let mut s = String::from("metric");
    for m in &r.per_modality {
        s.push(',');
        if m.name.contains([',', '"']) {
            s.push_str(&format!("\"{}\"", m.name.replace('"', "\"\"")));
        } else {
            s.push_str(&m.name);
        }
    }
    s.push_str(",total\n");
    type Pick = fn(&crate::eval::Metrics) -> Option<f64>;
    let rows: [(&str, Pick); 3] = [("ap", |m| m.ap), ("ap50", |m| m.ap50), ("ap75", |m| m.ap75)];
    for (name, pick) in rows {
        s.push_str(name);
        for m in &r.per_modality {
            s.push(',');
            s.push_str(&fmt_opt(pick(&m.metrics)));
        }
        s.push(',');
        s.push_str(&fmt_opt(pick(&r.overall)));
        s.push('\n');
    }
    s
}

/// Evaluates a run directory's checkpoint. `data` names an exported dataset
/// manifest (`dir/name.json`); without it the run's own validation split is
/// used.
pub fn run_eval(run_dir: &Path, data: Option<&Path>, out: &Path) -> Result<ApReport> {
    let (detector, projection, _) = load_model(run_dir, CHECKPOINT_STEM)?;
    let cfg = RunConfig::from_path(&run_dir.join(CONFIG_FILE))?;
    let registry = TokenRegistry::load(run_dir.join(TOKENS_FILE))?;
    let (catalog, samples) = match data {
        Some(p) => {
            let dir = p.parent().unwrap_or(Path::new("."));
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Validation(format!("data: bad manifest path {}", p.display())))?;
            load_dataset(dir, name)?
        }
        None => {
            let d = cfg.data.load()?;
            (d.catalog, d.val)
        }
    };
    ensure!(
        catalog.num_classes() == detector.config().num_classes,
        Validation,
        "data has {} classes, checkpoint expects {}",
        catalog.num_classes(),
        detector.config().num_classes
    );
    let report = evaluate(&detector, &projection, &registry, &catalog, &samples)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_json(out, &report)?;
    Ok(report)
}
