use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Critic, DiscreteJoint};
use crate::error::{ensure, Error, Result};

/// Smallest Monte-Carlo sample count accepted by [`infonce_estimate`].
pub const MIN_SAMPLES: usize = 1000;

/// One draw: `u`, its paired `v`, and `K + 1` candidates holding that `v` at
/// `slot` with marginal negatives elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub u: usize,
    pub positive: usize,
    pub candidates: Vec<usize>,
    pub slot: usize,
}

pub(crate) struct Samplers {
    pair: WeightedIndex<f64>,
    marginal: WeightedIndex<f64>,
    nv: usize,
}

impl Samplers {
    pub(crate) fn new(joint: &DiscreteJoint) -> Result<Self> {
        let bad = |e: rand::distr::weighted::Error| Error::Validation(format!("joint: {e}"));
        Ok(Self {
            pair: WeightedIndex::new(joint.table()).map_err(bad)?,
            marginal: WeightedIndex::new(joint.pv()).map_err(bad)?,
            nv: joint.dims().1,
        })
    }

    pub(crate) fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Candidates {
        let pair = self.pair.sample(rng);
        let (u, positive) = (pair / self.nv, pair % self.nv);
        let slot = rng.random_range(0..=k);
        let candidates = (0..=k)
            .map(|j| if j == slot { positive } else { self.marginal.sample(rng) })
            .collect();
        Candidates {
            u,
            positive,
            candidates,
            slot,
        }
    }
}

pub fn sample_candidates(joint: &DiscreteJoint, k: usize, rng: &mut ChaCha8Rng) -> Result<Candidates> {
    ensure!(k >= 1, Contract, "K must be at least 1");
    Ok(Samplers::new(joint)?.draw(k, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceEstimate {
    pub k: usize,
    pub n_samples: usize,
    /// Mean InfoNCE loss `L̂`.
    pub loss: f64,
    /// `ln(1 + K) − L̂`.
    pub bound: f64,
    /// Standard error of `L̂` (and of the bound).
    pub se: f64,
}

/// Monte-Carlo mean of `−ln[r(u, v) / Σ_j r(u, v_j)]` with `r = exp(s)`.
pub fn infonce_estimate(
    joint: &DiscreteJoint,
    critic: &Critic,
    k: usize,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NceEstimate> {
    ensure!(k >= 1, Contract, "K must be at least 1");
    ensure!(
        n_samples >= MIN_SAMPLES,
        Contract,
        "need at least {MIN_SAMPLES} samples, got {n_samples}"
    );
    let scores = critic.scores(joint)?;
    let nv = joint.dims().1;
    let samplers = Samplers::new(joint)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let c = samplers.draw(k, rng);
        let row = &scores[c.u * nv..(c.u + 1) * nv];
        let l = log_sum_exp(c.candidates.iter().map(|&v| row[v])) - row[c.positive];
        sum += l;
        sum_sq += l * l;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(NceEstimate {
        k,
        n_samples,
        loss: mean,
        bound: ((1 + k) as f64).ln() - mean,
        se: (var / n).sqrt(),
    })
}
