use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cluster_mean, qra_loss, AlignmentHead, DEFAULT_TAU};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{select_token, token_on_tape, Catalog, Sample, TokenMode, TokenSelection};
use crate::detector::{
    load_checkpoint, BoundDetector, CheckpointManifest, Detector, DetectorConfig, ForwardOptions, MocaMode, ParamSet,
};
use crate::error::{ensure, Error, Result};
use crate::optim::AdamW;
use crate::tokens::{TokenProjection, TokenRegistry};

/// Name of the token projection tensor in checkpoints.
pub const TOKEN_PROJ_NAME: &str = "token_proj.weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QraSettings {
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Decoder state index `l`: `Q^(1)` is the learned query content and
    /// `Q^(l)` the output of decoder layer `l − 1`.
    #[serde(default = "default_layer")]
    pub layer: usize,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_layer() -> usize {
    5
}

impl Default for QraSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            layer: 5,
        }
    }
}

impl QraSettings {
    pub fn validate(&self, config: &DetectorConfig) -> Result<()> {
        ensure!(
            self.tau > 0.0 && self.tau.is_finite(),
            Validation,
            "qra.tau must be positive, got {}",
            self.tau
        );
        ensure!(
            self.layer >= 2 && self.layer <= config.decoder_layers,
            Contract,
            "qra.layer must lie in [2, {}], got {}",
            config.decoder_layers,
            self.layer
        );
        Ok(())
    }
}

/// Everything pretraining updates: detector, token projection `W` and `g_φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub detector: Detector,
    pub projection: TokenProjection,
    pub head: AlignmentHead,
}

#[derive(Clone, Debug)]
pub struct BoundPretrain {
    pub detector: BoundDetector,
    pub w: Var,
    pub head: Vec<Var>,
}

impl BoundPretrain {
    /// Splits a flat variable list laid out as in [`PretrainModel::names`].
    pub fn from_vars(vars: &[Var], detector_len: usize) -> Result<Self> {
        ensure!(
            vars.len() == detector_len + 5,
            Dimension,
            "expected {} variables, got {}",
            detector_len + 5,
            vars.len()
        );
        Ok(Self {
            detector: BoundDetector {
                vars: vars[..detector_len].to_vec(),
            },
            w: vars[detector_len],
            head: vars[detector_len + 1..].to_vec(),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = self.detector.vars.clone();
        v.push(self.w);
        v.extend(&self.head);
        v
    }
}

impl PretrainModel {
    pub fn new(detector: Detector, projection: TokenProjection, head: AlignmentHead) -> Result<Self> {
        let d = detector.config().d_model;
        ensure!(
            projection.d_model() == d && head.d_model() == d,
            Dimension,
            "projection ({}) and head ({}) must match d_model {d}",
            projection.d_model(),
            head.d_model()
        );
        Ok(Self {
            detector,
            projection,
            head,
        })
    }

    /// Checkpoint order: detector tensors, `token_proj.weight`, `align.*`.
    pub fn names(&self) -> Vec<String> {
        let mut n = self.detector.params().names().to_vec();
        n.push(TOKEN_PROJ_NAME.into());
        n.extend(AlignmentHead::NAMES.iter().map(|s| s.to_string()));
        n
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t: Vec<&Tensor> = self.detector.params().tensors().iter().collect();
        t.push(&self.projection.weight);
        t.extend(self.head.params().tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t: Vec<&mut Tensor> = self.detector.params_mut().tensors_mut().iter_mut().collect();
        t.push(&mut self.projection.weight);
        t.extend(self.head.params_mut().tensors_mut().iter_mut());
        t
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPretrain {
        let detector = self.detector.bind(tape, trainable);
        let w = if trainable {
            tape.param(self.projection.weight.clone())
        } else {
            tape.constant(self.projection.weight.clone())
        };
        let head = self.head.params().bind(tape, trainable);
        BoundPretrain { detector, w, head }
    }
}

/// One batch element: image, modality and the classes its token averages.
#[derive(Clone, Debug)]
pub struct QraItem<'a> {
    pub image: &'a Tensor,
    pub modality_id: usize,
    pub selection: TokenSelection,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean alignment loss over a batch whose candidates are the batch's own
/// tokens. Also returns, per item, whether its positive token strictly
/// out-scores every other candidate.
pub fn batch_qra_loss(
    tape: &mut Tape,
    detector: &Detector,
    bound: &BoundPretrain,
    registry: &TokenRegistry,
    items: &[QraItem<'_>],
    settings: &QraSettings,
) -> Result<(Var, Vec<bool>)> {
    settings.validate(detector.config())?;
    ensure!(!items.is_empty(), Contract, "empty pretraining batch");
    let mut mods: Vec<usize> = items.iter().map(|i| i.modality_id).collect();
    mods.sort_unstable();
    mods.dedup();
    ensure!(
        mods.len() == items.len(),
        Contract,
        "batch negatives must come from other modalities"
    );

    let tokens = items
        .iter()
        .map(|it| token_on_tape(tape, bound.w, registry, &it.selection))
        .collect::<Result<Vec<_>>>()?;
    let cands = if tokens.len() == 1 {
        tokens[0]
    } else {
        tape.concat_rows(&tokens)?
    };
    let opts = ForwardOptions {
        mode: MocaMode::On,
        layers: Some(settings.layer - 1),
        heads: false,
    };
    let mut losses = Vec::with_capacity(items.len());
    let mut rank1 = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let out = detector.forward(tape, &bound.detector, it.image, Some(tokens[i]), opts)?;
        let qbar = cluster_mean(tape, out.states[settings.layer - 1])?;
        let u = AlignmentHead::apply(tape, &bound.head, qbar)?;
        losses.push(qra_loss(tape, u, cands, i, settings.tau)?);

        let uv = tape.value(u).data().to_vec();
        let sims: Vec<f64> = tokens.iter().map(|&t| cosine(&uv, tape.value(t).data())).collect();
        rank1.push(sims.iter().enumerate().all(|(j, &s)| j == i || sims[i] > s));
    }
    let stacked = if losses.len() == 1 {
        losses[0]
    } else {
        tape.concat_rows(&losses)?
    };
    let sum = tape.sum_all(stacked);
    Ok((tape.scale(sum, 1.0 / items.len() as f64), rank1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PretrainStep {
    pub loss: f64,
    /// Fraction of batch items whose positive token ranked first.
    pub rank1: f64,
}

/// One optimizer step on the alignment loss alone. Tokens are drawn per
/// sample from its ground-truth classes with `rng`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    model: &mut PretrainModel,
    opt: &mut AdamW,
    lr: f64,
    batch: &[&Sample],
    catalog: &Catalog,
    registry: &TokenRegistry,
    rng: &mut ChaCha8Rng,
    settings: &QraSettings,
) -> Result<PretrainStep> {
    settings.validate(model.detector.config())?;
    let mut items = Vec::with_capacity(batch.len());
    for s in batch {
        items.push(QraItem {
            image: &s.image,
            modality_id: s.modality_id,
            selection: select_token(s, catalog, registry, TokenMode::Train(&mut *rng))?,
        });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (loss, rank1) = batch_qra_loss(&mut tape, &model.detector, &bound, registry, &items, settings)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grads = ParamSet::gradients(&bound.all(), &grads);
    opt.step(&mut model.tensors_mut(), &grads, lr)?;
    Ok(PretrainStep {
        loss: value,
        rank1: rank1.iter().filter(|&&r| r).count() as f64 / rank1.len() as f64,
    })
}

/// Detector and token projection from a pretraining checkpoint, for
/// detection finetuning. The alignment head is dropped.
pub fn finetune_from_checkpoint(
    dir: &Path,
    stem: &str,
    expected: &DetectorConfig,
) -> Result<(Detector, TokenProjection, CheckpointManifest)> {
    let (manifest, tensors) = load_checkpoint(dir, stem)?;
    if manifest.config != *expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config differs from the run config: {:?} vs {:?}",
            manifest.config, expected
        )));
    }
    split_checkpoint(manifest, tensors)
}

/// Detector and token projection from any checkpoint holding both, using the
/// config stored in it.
pub fn load_model(dir: &Path, stem: &str) -> Result<(Detector, TokenProjection, CheckpointManifest)> {
    let (manifest, tensors) = load_checkpoint(dir, stem)?;
    split_checkpoint(manifest, tensors)
}

fn split_checkpoint(
    manifest: CheckpointManifest,
    tensors: Vec<(String, Tensor)>,
) -> Result<(Detector, TokenProjection, CheckpointManifest)> {
    let mut names = Vec::new();
    let mut det = Vec::new();
    let mut proj = None;
    for (name, t) in tensors {
        if name == TOKEN_PROJ_NAME {
            proj = Some(t);
        } else if !name.starts_with("align.") {
            names.push(name);
            det.push(t);
        }
    }
    let proj = proj.ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {TOKEN_PROJ_NAME}")))?;
    let detector = Detector::from_tensors(manifest.config.clone(), &names, det)?;
    ensure!(
        proj.rows() == manifest.config.d_model,
        Checkpoint,
        "token projection has {} rows, d_model is {}",
        proj.rows(),
        manifest.config.d_model
    );
    Ok((detector, TokenProjection::from_weight(proj), manifest))
}
