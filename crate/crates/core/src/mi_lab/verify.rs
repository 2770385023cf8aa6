use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_decomposition, exact_infonce_loss, exact_mi, infonce_estimate, Critic, DiscreteJoint, NceEstimate};
use crate::data::derive_seed;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub ks: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
    /// Monte-Carlo slack in standard errors.
    pub se_factor: f64,
    /// Exact enumeration runs when both alphabets are at most this size...
    pub exact_max_support: usize,
    /// ...and `K` is at most this.
    pub exact_max_k: usize,
    /// Slack for exact comparisons of the bound against `I(U;V)`.
    pub exact_tol: f64,
    /// Slack for the exact posterior identity under the optimal critic.
    pub identity_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 7, 15],
            n_samples: 20_000,
            seed: 0,
            se_factor: 5.0,
            exact_max_support: 6,
            exact_max_k: 3,
            exact_tol: 1e-9,
            identity_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub critic: String,
    pub k: usize,
    pub estimate: NceEstimate,
    pub exact_loss: Option<f64>,
    pub exact_bound: Option<f64>,
    /// `E[H(J | U, V)]`, when enumerated.
    pub posterior_entropy: Option<f64>,
    /// Largest gap between true posterior and critic softmax, when enumerated.
    pub posterior_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub exact_mi: f64,
    pub cells: Vec<CellReport>,
    pub failures: Vec<String>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks, for every `(critic, K)` cell: the Monte-Carlo bound stays below
/// `I + se_factor·SE`; on small supports the exact bound stays below `I`, the
/// loss is at least the posterior entropy (with equality for the optimal
/// critic), and the optimal critic's softmax equals the true slot posterior.
/// The optimal critic's bound must also be non-decreasing in `K` up to two
/// combined standard errors plus `exact_tol`, which covers rounding when the
/// critic is constant and every estimate is exactly zero.
pub fn verify_bound(joint: &DiscreteJoint, critics: &[Critic], opts: &VerifyOptions) -> Result<BoundReport> {
    ensure!(!opts.ks.is_empty(), Validation, "no K values given");
    let mi = exact_mi(joint);
    let (nu, nv) = joint.dims();
    let small = nu.max(nv) <= opts.exact_max_support;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (ci, critic) in critics.iter().enumerate() {
        let mut ks = opts.ks.clone();
        ks.sort_unstable();
        let mut prev: Option<NceEstimate> = None;
        for &k in &ks {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, ci as u64, k as u64]));
            let est = infonce_estimate(joint, critic, k, opts.n_samples, &mut rng)?;
            let tag = format!("{}#{ci} K={k}", critic.name());
            if est.bound > mi + opts.se_factor * est.se {
                failures.push(format!(
                    "{tag}: bound {:.6} > I {:.6} + {}·SE ({:.2e})",
                    est.bound, mi, opts.se_factor, est.se
                ));
            }
            let mut cell = CellReport {
                critic: critic.name().into(),
                k,
                estimate: est.clone(),
                exact_loss: None,
                exact_bound: None,
                posterior_entropy: None,
                posterior_diff: None,
            };
            if small && k <= opts.exact_max_k {
                let loss = exact_infonce_loss(joint, critic, k)?;
                let bound = ((1 + k) as f64).ln() - loss;
                if bound > mi + opts.exact_tol {
                    failures.push(format!("{tag}: exact bound {bound:.12} > I {mi:.12}"));
                }
                let dec = exact_decomposition(joint, critic, k)?;
                if (dec.cross_entropy - loss).abs() > opts.exact_tol {
                    failures.push(format!(
                        "{tag}: cross-entropy {:.12} differs from loss {loss:.12}",
                        dec.cross_entropy
                    ));
                }
                if dec.cross_entropy < dec.posterior_entropy - opts.exact_tol {
                    failures.push(format!(
                        "{tag}: loss {:.12} below posterior entropy {:.12}",
                        dec.cross_entropy, dec.posterior_entropy
                    ));
                }
                if *critic == Critic::Optimal {
                    if dec.max_posterior_diff > opts.identity_tol {
                        failures.push(format!(
                            "{tag}: posterior identity off by {:.3e}",
                            dec.max_posterior_diff
                        ));
                    }
                    if (dec.cross_entropy - dec.posterior_entropy).abs() > opts.exact_tol {
                        failures.push(format!("{tag}: optimal critic leaves a cross-entropy gap"));
                    }
                }
                cell.exact_loss = Some(loss);
                cell.exact_bound = Some(bound);
                cell.posterior_entropy = Some(dec.posterior_entropy);
                cell.posterior_diff = Some(dec.max_posterior_diff);
            }
            if *critic == Critic::Optimal {
                if let Some(p) = &prev {
                    let slack = 2.0 * (p.se * p.se + est.se * est.se).sqrt() + opts.exact_tol;
                    if est.bound < p.bound - slack {
                        failures.push(format!(
                            "{tag}: bound {:.6} fell below K={} bound {:.6}",
                            est.bound, p.k, p.bound
                        ));
                    }
                }
                prev = Some(est);
            }
            cells.push(cell);
        }
    }
    Ok(BoundReport {
        exact_mi: mi,
        cells,
        failures,
    })
}

/// `count` seeded joints on alphabets of 2 to 6 symbols. Every fourth is an
/// exact product of marginals; the rest carry a random diagonal coupling.
pub fn random_joints(count: usize, seed: u64) -> Result<Vec<DiscreteJoint>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
            let nu = rng.random_range(2..=6);
            let nv = rng.random_range(2..=6);
            if i % 4 == 3 {
                let mut m = |n: usize| {
                    let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
                    let s: f64 = p.iter().sum();
                    p.iter_mut().for_each(|v| *v /= s);
                    p
                };
                let (pu, pv) = (m(nu), m(nv));
                DiscreteJoint::independent(&pu, &pv)
            } else {
                let coupling = rng.random_range(0.0..4.0);
                DiscreteJoint::random(nu, nv, coupling, &mut rng)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub index: usize,
    pub dims: (usize, usize),
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub options: VerifyOptions,
    pub joints: Vec<JointReport>,
    /// Total failed checks over all joints.
    pub violations: usize,
}

/// [`verify_bound`] over `count` seeded [`random_joints`], each with the
/// optimal critic and a random cosine critic (4-dim embeddings, `τ = 0.5`).
/// Joints are spread over `threads` workers; the result does not depend on
/// the thread count.
pub fn certify(count: usize, opts: &VerifyOptions, threads: usize) -> Result<Certification> {
    ensure!(threads >= 1, Validation, "thread count must be at least 1");
    let joints = random_joints(count, opts.seed)?;
    let run = |i: usize| -> Result<JointReport> {
        let j = &joints[i];
        let (nu, nv) = j.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, i as u64, 0xc0]));
        let critics = [Critic::Optimal, Critic::random_cosine(nu, nv, 4, 0.5, &mut rng)];
        let cell_opts = VerifyOptions {
            seed: derive_seed(&[opts.seed, i as u64]),
            ..opts.clone()
        };
        Ok(JointReport {
            index: i,
            dims: (nu, nv),
            report: verify_bound(j, &critics, &cell_opts)?,
        })
    };
    let mut out: Vec<Result<JointReport>> = if threads == 1 {
        (0..count).map(run).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run = &run;
                    s.spawn(move || (t..count).step_by(threads).map(run).collect::<Vec<_>>())
                })
                .collect();
            let mut all: Vec<Result<JointReport>> =
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
            all.sort_by_key(|r| r.as_ref().map(|j| j.index).unwrap_or(0));
            all
        })
    };
    let joints = out.drain(..).collect::<Result<Vec<_>>>()?;
    let violations = joints.iter().map(|j| j.report.failures.len()).sum();
    Ok(Certification {
        options: opts.clone(),
        joints,
        violations,
    })
}
