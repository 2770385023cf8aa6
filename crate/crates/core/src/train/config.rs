use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, generate_synthetic, load_dataset, Catalog, DatasetSpec, Sample, Split};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::{AdamWConfig, MultiStep};
use crate::queryrepa::{QraSettings, DEFAULT_TAU};
use crate::tokens::TokenRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSettings {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by `decay_factor`.
    #[serde(default = "default_decay_epoch")]
    pub decay_epoch: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over the training split.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    1e-4
}
fn default_decay_epoch() -> usize {
    40
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    50
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            decay_epoch: default_decay_epoch(),
            decay_factor: default_decay_factor(),
            epochs: default_epochs(),
            steps_per_epoch: None,
        }
    }
}

impl OptimSettings {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::new(self.lr, self.weight_decay)
    }

    pub fn schedule(&self) -> MultiStep {
        MultiStep {
            milestones: vec![self.decay_epoch],
            factor: self.decay_factor,
        }
    }
}

/// Alignment pretraining settings. The aligned query state is
/// `detector.qra_layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QraRunSettings {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    /// Pretraining learning rate; the optimizer's `lr` when absent.
    #[serde(default)]
    pub lr: Option<f64>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_pretrain_steps() -> usize {
    200
}

impl Default for QraRunSettings {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            steps: default_pretrain_steps(),
            lr: None,
        }
    }
}

impl QraRunSettings {
    pub fn settings(&self, detector: &DetectorConfig) -> QraSettings {
        QraSettings {
            tau: self.tau,
            layer: detector.qra_layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory; the built-in five-modality spec when `spec` is absent.
    Synthetic {
        #[serde(default)]
        spec: Option<DatasetSpec>,
        #[serde(default)]
        seed: u64,
    },
    /// Datasets written by `gen-data`: `dir/<train>.json` and `dir/<val>.json`.
    Exported { dir: PathBuf, train: String, val: String },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { spec: None, seed: 0 }
    }
}

/// Both splits and their shared catalog.
pub struct RunData {
    pub catalog: Catalog,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl DataSource {
    pub fn resolve_spec(&self) -> Option<DatasetSpec> {
        match self {
            DataSource::Synthetic { spec, seed } => Some(spec.clone().unwrap_or_else(|| DatasetSpec::default_medical(*seed))),
            DataSource::Exported { .. } => None,
        }
    }

    pub fn load(&self) -> Result<RunData> {
        match self {
            DataSource::Synthetic { .. } => {
                let spec = self.resolve_spec().expect("synthetic source");
                spec.validate()?;
                Ok(RunData {
                    catalog: spec.catalog(),
                    train: generate_synthetic(&spec, Split::Train)?,
                    val: generate_synthetic(&spec, Split::Val)?,
                })
            }
            DataSource::Exported { dir, train, val } => {
                let (catalog, tr) = load_dataset(dir, train)?;
                let (other, va) = load_dataset(dir, val)?;
                if catalog != other {
                    return Err(Error::Validation(format!(
                        "data: splits {train} and {val} have different catalogs"
                    )));
                }
                Ok(RunData {
                    catalog,
                    train: tr,
                    val: va,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenSource {
    /// Deterministic embeddings derived from the catalog's prompts.
    Synthetic {
        #[serde(default = "default_d_text")]
        d_text: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Registry JSON file.
    File { path: PathBuf },
}

fn default_d_text() -> usize {
    32
}

impl Default for TokenSource {
    fn default() -> Self {
        TokenSource::Synthetic {
            d_text: default_d_text(),
            seed: 0,
        }
    }
}

impl TokenSource {
    /// Registry covering every `(modality, class)` pair of the catalog.
    pub fn load(&self, catalog: &Catalog) -> Result<TokenRegistry> {
        let registry = match self {
            TokenSource::Synthetic { d_text, seed } => TokenRegistry::synthetic(*d_text, *seed, &catalog.token_grid())?,
            TokenSource::File { path } => TokenRegistry::load(path)?,
        };
        for c in &catalog.classes {
            let m = &catalog.modalities[c.modality_id];
            registry
                .get(m, &c.name)
                .map_err(|_| Error::Validation(format!("tokens: registry has no entry for {m}|{}", c.name)))?;
        }
        Ok(registry)
    }
}

/// Complete description of a pretraining or training run. The MoCA switch is
/// `detector.moca`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optim: OptimSettings,
    pub batch_size: usize,
    /// Master seed; every random stream of a run derives from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub tokens: TokenSource,
    #[serde(default)]
    pub qra: QraRunSettings,
    /// Evaluate on the validation split every this many epochs (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

/// Named random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Order = 2,
    TokenDraw = 3,
    Projection = 4,
    Head = 5,
}

impl Stream {
    pub const ALL: [Stream; 5] = [Stream::Init, Stream::Order, Stream::TokenDraw, Stream::Projection, Stream::Head];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Order => "order",
            Stream::TokenDraw => "token_draw",
            Stream::Projection => "projection",
            Stream::Head => "head",
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults on the built-in synthetic dataset.
    pub fn desk() -> Self {
        let spec = DatasetSpec::default_medical(0);
        let num_classes = spec.catalog().num_classes();
        Self {
            detector: DetectorConfig::desk(num_classes),
            loss: LossWeights::default(),
            optim: OptimSettings::default(),
            batch_size: spec.num_modalities(),
            seed: 0,
            data: DataSource::default(),
            tokens: TokenSource::default(),
            qra: QraRunSettings::default(),
            eval_every: 0,
        }
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        derive_seed(&[self.seed, stream as u64])
    }

    /// Parses a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        if let DataSource::Exported { dir, .. } = &mut self.data {
            fix(dir);
        }
        if let TokenSource::File { path } = &mut self.tokens {
            fix(path);
        }
    }

    /// Every field-level problem, one line each, in a single error.
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("\n")))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut checks = vec![
            self.detector.validate(),
            self.loss.validate(),
            self.optim.adamw().validate(),
            self.qra.settings(&self.detector).validate(&self.detector),
        ];
        let spec = self.data.resolve_spec();
        if let Some(spec) = &spec {
            checks.push(spec.validate());
        }
        let mut p: Vec<String> = checks.into_iter().filter_map(|r| r.err().map(strip)).collect();
        if let Some(lr) = self.qra.lr {
            if !(lr.is_finite() && lr > 0.0) {
                p.push(format!("qra.lr must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if !(self.optim.decay_factor.is_finite() && self.optim.decay_factor > 0.0) {
            p.push(format!("optim.decay_factor must be positive, got {}", self.optim.decay_factor));
        }
        if self.optim.steps_per_epoch == Some(0) {
            p.push("optim.steps_per_epoch must be at least 1".into());
        }
        if let TokenSource::Synthetic { d_text: 0, .. } = self.tokens {
            p.push("tokens.d_text must be at least 1".into());
        }
        if let Some(spec) = &spec {
            p.extend(self.catalog_problems(&spec.catalog(), false));
        }
        p
    }

    fn catalog_problems(&self, catalog: &Catalog, pretrain: bool) -> Vec<String> {
        let mut p = Vec::new();
        if self.detector.num_classes != catalog.num_classes() {
            p.push(format!(
                "detector.num_classes ({}) must equal the dataset's class count ({})",
                self.detector.num_classes,
                catalog.num_classes()
            ));
        }
        let m = catalog.num_modalities();
        if pretrain && self.batch_size > m {
            p.push(format!(
                "batch_size ({}) must not exceed the number of modalities ({m}) for pretraining",
                self.batch_size
            ));
        }
        p
    }

    /// Checks that need the dataset's catalog.
    pub fn validate_against(&self, catalog: &Catalog, pretrain: bool) -> Result<()> {
        let problems = self.catalog_problems(catalog, pretrain);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("\n")))
        }
    }

    /// [`RunConfig::validate`] plus the pretraining bound `B <= M`, checked
    /// from the config alone when the modality count is known without
    /// loading data.
    pub fn validate_pretrain(&self) -> Result<()> {
        let mut problems = self.problems();
        if let Some(spec) = self.data.resolve_spec() {
            problems.extend(
                self.catalog_problems(&spec.catalog(), true)
                    .into_iter()
                    .filter(|p| p.starts_with("batch_size")),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("\n")))
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Validation(s) | Error::Contract(s) | Error::Dimension(s) => s,
        other => other.to_string(),
    }
}
