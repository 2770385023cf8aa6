//! Numerical check that the InfoNCE bound `ln(1+K) − L` never exceeds the
//! mutual information, on finite joints where `I(U;V)` is exact.

mod estimate;
mod exact;
mod verify;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use estimate::{infonce_estimate, sample_candidates, Candidates, NceEstimate, MIN_SAMPLES};
pub use exact::{exact_decomposition, exact_infonce_loss, Decomposition, MAX_ENUMERATION};
pub use verify::{certify, random_joints, verify_bound, BoundReport, Certification, CellReport, JointReport, VerifyOptions};

/// Probability table `p(u, v)` over `|U| × |V|`, row-major by `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    nu: usize,
    nv: usize,
    p: Vec<f64>,
    pu: Vec<f64>,
    pv: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nu: usize, nv: usize, p: Vec<f64>) -> Result<Self> {
        ensure!(nu >= 1 && nv >= 1, Validation, "joint alphabets must be non-empty");
        ensure!(p.len() == nu * nv, Validation, "joint {nu}x{nv} with {} entries", p.len());
        ensure!(
            p.iter().all(|v| v.is_finite() && *v >= 0.0),
            Validation,
            "joint entries must be finite and non-negative"
        );
        let total: f64 = p.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-12, Validation, "joint sums to {total}, not 1");
        let pu = (0..nu).map(|u| p[u * nv..(u + 1) * nv].iter().sum()).collect();
        let pv = (0..nv).map(|v| (0..nu).map(|u| p[u * nv + v]).sum()).collect();
        Ok(Self { nu, nv, p, pu, pv })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nv = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == nv), Validation, "ragged joint table");
        Self::new(rows.len(), nv, rows.concat())
    }

    /// `p(u)p(v)`.
    pub fn independent(pu: &[f64], pv: &[f64]) -> Result<Self> {
        let p = pu.iter().flat_map(|a| pv.iter().map(move |b| a * b)).collect();
        Self::new(pu.len(), pv.len(), p)
    }

    /// `U = V` uniform over `n` symbols.
    pub fn identity(n: usize) -> Result<Self> {
        let p = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 / n as f64 } else { 0.0 }).collect();
        Self::new(n, n, p)
    }

    /// Random table mixing a diagonal coupling (weight `coupling`) with
    /// exponential noise, renormalized.
    pub fn random(nu: usize, nv: usize, coupling: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p: Vec<f64> = (0..nu * nv)
            .map(|k| {
                let diag = if k / nv % nv == k % nv { coupling } else { 0.0 };
                -rng.random::<f64>().max(f64::MIN_POSITIVE).ln() + diag
            })
            .collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        // Absorb rounding so the sum check holds.
        let s: f64 = p.iter().sum();
        p[0] += 1.0 - s;
        Self::new(nu, nv, p)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nu, self.nv)
    }

    pub fn table(&self) -> &[f64] {
        &self.p
    }

    pub fn p(&self, u: usize, v: usize) -> f64 {
        self.p[u * self.nv + v]
    }

    pub fn pu(&self) -> &[f64] {
        &self.pu
    }

    pub fn pv(&self) -> &[f64] {
        &self.pv
    }

    pub fn transpose(&self) -> Self {
        let p = (0..self.nu * self.nv)
            .map(|k| self.p(k % self.nu, k / self.nu))
            .collect();
        Self {
            nu: self.nv,
            nv: self.nu,
            p,
            pu: self.pv.clone(),
            pv: self.pu.clone(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.p.chunks(self.nv).map(<[f64]>::to_vec).collect()
    }
}

/// `Σ p(u,v) ln[p(u,v) / (p(u)p(v))]` in nats, with `0 ln 0 = 0`.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let mut mi = 0.0;
    for u in 0..joint.nu {
        for v in 0..joint.nv {
            let p = joint.p(u, v);
            if p > 0.0 {
                mi += p * (p / (joint.pu[u] * joint.pv[v])).ln();
            }
        }
    }
    mi
}

/// Score function `s(u, v)`; the model posterior over candidate slots is the
/// softmax of the scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Critic {
    /// `ln[p(v|u) / p(v)]`, the Bayes-optimal critic; `−∞` off the support.
    Optimal,
    /// `cos(e_u, e_v) / τ` for fixed embeddings.
    Cosine {
        u_emb: Vec<Vec<f64>>,
        v_emb: Vec<Vec<f64>>,
        tau: f64,
    },
    /// Explicit `|U| × |V|` score table, row-major.
    Table { scores: Vec<f64> },
}

impl Critic {
    pub fn random_cosine(nu: usize, nv: usize, dim: usize, tau: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut emb = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        Critic::Cosine {
            u_emb: emb(nu),
            v_emb: emb(nv),
            tau,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Critic::Optimal => "optimal",
            Critic::Cosine { .. } => "cosine",
            Critic::Table { .. } => "table",
        }
    }

    /// All scores `s(u, v)` as a row-major table.
    pub fn scores(&self, joint: &DiscreteJoint) -> Result<Vec<f64>> {
        let (nu, nv) = joint.dims();
        match self {
            Critic::Optimal => Ok((0..nu * nv)
                .map(|k| {
                    let (u, v) = (k / nv, k % nv);
                    let p = joint.p(u, v);
                    if p > 0.0 {
                        p.ln() - joint.pu[u].ln() - joint.pv[v].ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()),
            Critic::Cosine { u_emb, v_emb, tau } => {
                ensure!(*tau > 0.0, Validation, "critic temperature must be positive");
                ensure!(
                    u_emb.len() == nu && v_emb.len() == nv,
                    Validation,
                    "critic embeds {}x{} symbols, joint is {nu}x{nv}",
                    u_emb.len(),
                    v_emb.len()
                );
                let norm = |e: &[f64]| e.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut out = Vec::with_capacity(nu * nv);
                for a in u_emb {
                    for b in v_emb {
                        ensure!(a.len() == b.len(), Validation, "embedding widths differ");
                        let den = norm(a) * norm(b);
                        ensure!(den > 0.0, Validation, "zero embedding in cosine critic");
                        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        out.push(dot / den / tau);
                    }
                }
                Ok(out)
            }
            Critic::Table { scores } => {
                ensure!(scores.len() == nu * nv, Validation, "score table size mismatch");
                ensure!(scores.iter().all(|s| s.is_finite()), Validation, "non-finite score");
                Ok(scores.clone())
            }
        }
    }
}

/// `ln Σ exp(x_i)`, tolerating `−∞` entries.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
