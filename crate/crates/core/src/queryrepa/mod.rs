//! Contrastive alignment of the mean decoder query state with the sample's
//! modality token, against the other tokens of a modality-distinct batch.

mod pretrain;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::detector::{Init, ParamSet};
use crate::error::{ensure, Result};

pub use pretrain::{
    batch_qra_loss, finetune_from_checkpoint, load_model, pretrain_step, BoundPretrain, PretrainModel, PretrainStep, QraItem,
    QraSettings, TOKEN_PROJ_NAME,
};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// `g_φ`: two-layer ReLU MLP `d → d → d`, used only while pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHead {
    params: ParamSet,
}

impl AlignmentHead {
    pub const NAMES: [&'static str; 4] = ["align.w1", "align.b1", "align.w2", "align.b2"];

    pub fn init(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        params.push(Self::NAMES[0], d_model, d_model, Init::Xavier, rng);
        params.push(Self::NAMES[1], 1, d_model, Init::Zeros, rng);
        params.push(Self::NAMES[2], d_model, d_model, Init::Xavier, rng);
        params.push(Self::NAMES[3], 1, d_model, Init::Zeros, rng);
        Self { params }
    }

    pub fn from_tensors(d_model: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut h = Self::init(d_model, &mut rng);
        h.params.assign(tensors)?;
        Ok(h)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.params.get(0).rows()
    }

    /// Applies the head to `x` (`k × d`) given its four bound tensors.
    pub fn apply(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        ensure!(vars.len() == 4, Contract, "alignment head takes 4 tensors, got {}", vars.len());
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add(h, vars[1])?;
        let h = tape.relu(h);
        let y = tape.matmul(h, vars[2])?;
        tape.add(y, vars[3])
    }
}

/// Row mean `q̄ = (1/N) Σ q_i` of an `N × d` query state, as `1 × d`.
pub fn cluster_mean(tape: &mut Tape, q: Var) -> Result<Var> {
    tape.mean_rows(q)
}

/// `−ln softmax(cos(u, c_j) / τ)` at `positive`, where `u` is `1 × d` and the
/// candidates are the rows of `candidates` (`(K+1) × d`).
pub fn qra_loss(tape: &mut Tape, u: Var, candidates: Var, positive: usize, tau: f64) -> Result<Var> {
    ensure!(tau > 0.0 && tau.is_finite(), Validation, "temperature must be positive, got {tau}");
    let (k1, d) = tape.dims(candidates);
    ensure!(
        positive < k1,
        Contract,
        "positive index {positive} is not among the {k1} candidates"
    );
    ensure!(tape.dims(u) == (1, d), Dimension, "statistic {:?} vs candidate width {d}", tape.dims(u));
    let sims = tape.cosine_sim(candidates, u)?;
    let row = tape.transpose(sims);
    let logits = tape.scale(row, 1.0 / tau);
    let ls = tape.log_softmax_rows(logits)?;
    let pick = tape.slice_cols(ls, positive, 1)?;
    Ok(tape.neg(pick))
}
