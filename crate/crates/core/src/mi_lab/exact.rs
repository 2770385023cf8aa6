use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Critic, DiscreteJoint};
use crate::error::{ensure, Result};

/// Largest number of `(u, v_0, …, v_K)` tuples the exact routines enumerate.
pub const MAX_ENUMERATION: usize = 50_000_000;

fn check_size(joint: &DiscreteJoint, slots: usize) -> Result<()> {
    let (nu, nv) = joint.dims();
    let total = (nv as f64).powi(slots as i32) * nu as f64;
    ensure!(
        total <= MAX_ENUMERATION as f64,
        Contract,
        "exact enumeration of {total:.0} tuples exceeds {MAX_ENUMERATION}"
    );
    Ok(())
}

/// Calls `f` with every tuple in `{0..n}^len` in odometer order.
fn for_each_tuple(n: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let mut t = vec![0usize; len];
    loop {
        f(&t);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            t[i] += 1;
            if t[i] < n {
                break;
            }
            t[i] = 0;
        }
    }
}

/// Expected InfoNCE loss by summing over the positive pair and all `|V|^K`
/// negative tuples. The slot of the positive does not change the loss.
pub fn exact_infonce_loss(joint: &DiscreteJoint, critic: &Critic, k: usize) -> Result<f64> {
    ensure!(k >= 1, Contract, "K must be at least 1");
    check_size(joint, k + 1)?;
    let (nu, nv) = joint.dims();
    let s = critic.scores(joint)?;
    let pv = joint.pv();
    let mut total = 0.0;
    let mut vals = vec![0.0; k + 1];
    for u in 0..nu {
        let row = &s[u * nv..(u + 1) * nv];
        for v0 in 0..nv {
            let p0 = joint.p(u, v0);
            if p0 == 0.0 {
                continue;
            }
            vals[0] = row[v0];
            for_each_tuple(nv, k, |negs| {
                let w: f64 = negs.iter().map(|&v| pv[v]).product();
                if w == 0.0 {
                    return;
                }
                for (j, &v) in negs.iter().enumerate() {
                    vals[j + 1] = row[v];
                }
                total += p0 * w * (log_sum_exp(vals.iter().copied()) - row[v0]);
            });
        }
    }
    Ok(total)
}

/// Exact split of the expected loss as a cross-entropy against the true slot
/// posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `E[−ln q(J | U, V_{0:K})]` under the critic's softmax `q`; equals the
    /// expected InfoNCE loss.
    pub cross_entropy: f64,
    /// `E[H(J | U, V_{0:K})]` of the true posterior.
    pub posterior_entropy: f64,
    /// Largest `|P(J=j | u, v_{0:K}) − q_j|` over the support.
    pub max_posterior_diff: f64,
}

/// Enumerates `u` and every ordered candidate tuple. The true posterior comes
/// from Bayes' rule, `P(J=j | u, v) ∝ p(v_j | u) Π_{i≠j} p(v_i)`.
pub fn exact_decomposition(joint: &DiscreteJoint, critic: &Critic, k: usize) -> Result<Decomposition> {
    ensure!(k >= 1, Contract, "K must be at least 1");
    check_size(joint, k + 1)?;
    let (nu, nv) = joint.dims();
    let s = critic.scores(joint)?;
    let pv = joint.pv();
    let mut ce = 0.0;
    let mut h = 0.0;
    let mut max_diff: f64 = 0.0;
    let mut w = vec![0.0; k + 1];
    for u in 0..nu {
        let pu = joint.pu()[u];
        if pu == 0.0 {
            continue;
        }
        let row = &s[u * nv..(u + 1) * nv];
        for_each_tuple(nv, k + 1, |t| {
            for j in 0..=k {
                let others: f64 = t.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &v)| pv[v]).product();
                w[j] = joint.p(u, t[j]) / pu * others;
            }
            let z: f64 = w.iter().sum();
            if z == 0.0 {
                return;
            }
            let mass = pu * z / (k + 1) as f64;
            let lse = log_sum_exp(t.iter().map(|&v| row[v]));
            for j in 0..=k {
                let post = w[j] / z;
                let logq = row[t[j]] - lse;
                max_diff = max_diff.max((post - logq.exp()).abs());
                if post > 0.0 {
                    ce -= mass * post * logq;
                    h -= mass * post * post.ln();
                }
            }
        });
    }
    Ok(Decomposition {
        cross_entropy: ce,
        posterior_entropy: h,
        max_posterior_diff: max_diff,
    })
}
