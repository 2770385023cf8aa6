//! Minimum-cost bipartite assignment with a deterministic tie-break.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Row-major `queries × ground truths` cost table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "cost matrix {rows}x{cols} with {} entries",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Dimension, "ragged cost rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective `(query, gt)` pairs sorted by query index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    /// Sum of the matched costs in pair order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.at(q, g)).sum()
    }
}

/// Shortest-augmenting-path assignment on the sub-table `rows × cols`
/// (`rows.len() <= cols.len()`), matching every listed row. Returns the
/// chosen column position for each row position.
fn solve_rows_le_cols(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.at(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Optimal pairs `(query, gt)` of size `min(|qs|, |gs|)` on a sub-table.
fn solve(cost: &CostMatrix, qs: &[usize], gs: &[usize]) -> Vec<(usize, usize)> {
    if qs.is_empty() || gs.is_empty() {
        return Vec::new();
    }
    if qs.len() <= gs.len() {
        let a = solve_rows_le_cols(cost, qs, gs);
        qs.iter().zip(a).map(|(&q, j)| (q, gs[j])).collect()
    } else {
        let t = CostMatrix {
            rows: cost.cols,
            cols: cost.rows,
            data: (0..cost.cols * cost.rows)
                .map(|k| cost.at(k % cost.rows, k / cost.rows))
                .collect(),
        };
        let a = solve_rows_le_cols(&t, gs, qs);
        let mut pairs: Vec<(usize, usize)> = gs.iter().zip(a).map(|(&g, i)| (qs[i], g)).collect();
        pairs.sort_unstable();
        pairs
    }
}

fn sum_pairs(cost: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(q, g)| cost.at(q, g)).sum()
}

/// Minimum-total-cost matching of size `min(N, G)`. Among optimal matchings
/// the one whose sorted pair list is lexicographically smallest is returned:
/// queries are fixed in ascending order to their smallest feasible gt, each
/// choice verified by re-solving the remaining sub-problem.
pub fn hungarian(cost: &CostMatrix) -> Result<Matching> {
    ensure!(
        cost.data.iter().all(|v| v.is_finite()),
        Validation,
        "cost matrix has non-finite entries"
    );
    let (n, g) = (cost.rows, cost.cols);
    let k = n.min(g);
    if k == 0 {
        return Ok(Matching { pairs: Vec::new() });
    }
    let all_q: Vec<usize> = (0..n).collect();
    let all_g: Vec<usize> = (0..g).collect();
    let best_pairs = solve(cost, &all_q, &all_g);
    let best = sum_pairs(cost, &best_pairs);
    let scale = cost.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * k as f64;

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_sum = 0.0;
    let mut free_g = all_g;
    for q in 0..n {
        if fixed.len() == k {
            break;
        }
        let rest_q: Vec<usize> = ((q + 1)..n).collect();
        let needed = k - fixed.len();
        let mut choice: Option<(usize, f64)> = None;
        let mut fallback: Option<(Option<usize>, f64)> = None;
        for (pos, &j) in free_g.iter().enumerate() {
            let rest_g: Vec<usize> = free_g.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &x)| x).collect();
            if rest_q.len().min(rest_g.len()) != needed - 1 {
                continue;
            }
            let sub = solve(cost, &rest_q, &rest_g);
            let total = fixed_sum + cost.at(q, j) + sum_pairs(cost, &sub);
            if total <= best + tol {
                choice = Some((j, cost.at(q, j)));
                break;
            }
            if fallback.is_none_or(|(_, t)| total < t) {
                fallback = Some((Some(j), total));
            }
        }
        if choice.is_none() && rest_q.len().min(free_g.len()) == needed {
            let sub = solve(cost, &rest_q, &free_g);
            let total = fixed_sum + sum_pairs(cost, &sub);
            if total <= best + tol {
                continue;
            }
            if fallback.is_none_or(|(_, t)| total < t) {
                fallback = Some((None, total));
            }
        }
        let pick = match (choice, fallback) {
            (Some((j, _)), _) => Some(j),
            (None, Some((j, _))) => j,
            (None, None) => None,
        };
        if let Some(j) = pick {
            fixed.push((q, j));
            fixed_sum += cost.at(q, j);
            free_g.retain(|&x| x != j);
        }
    }
    Ok(Matching { pairs: fixed })
}
