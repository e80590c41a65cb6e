//! Minimum-cost one-to-one assignment and the matched multi-reference loss.

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Prediction-to-reference assignment: `perm[i]` is the reference matched to
/// prediction `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

fn validate(cost: &[Vec<f64>]) -> Result<()> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::InvalidCost(format!("row of length {} in a {n}-row matrix", row.len())));
    }
    if cost.iter().flatten().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidCost("entries must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Row-order sum of the matched entries.
fn perm_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment of a square cost matrix. Among optimal permutations the
/// lexicographically smallest is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    validate(cost)?;
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment { perm: Vec::new(), total_cost: 0.0 });
    }
    let optimum = perm_cost(cost, &solve(cost));
    let tol = 1e-12 * (1.0 + optimum.abs());

    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion.
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut prefix = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let rest_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != j).collect();
            let sub: Vec<Vec<f64>> =
                rest_rows.iter().map(|&r| rest_cols.iter().map(|&c| cost[r][c]).collect()).collect();
            let rest = if sub.is_empty() { 0.0 } else { perm_cost(&sub, &solve(&sub)) };
            if prefix + cost[i][j] + rest <= optimum + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        used[j] = true;
        prefix += cost[i][j];
        perm.push(j);
    }
    let total_cost = perm_cost(cost, &perm);
    Ok(Assignment { perm, total_cost })
}

/// Shortest augmenting path solver with row and column potentials, O(n^3).
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// References laid out to match `m` predictions: extras beyond `m` are
/// dropped and a shorter list is cycled. Returns the list and the number of
/// dropped references.
pub fn align_refs(refs: &[Trajectory], m: usize) -> (Vec<Trajectory>, usize) {
    if refs.is_empty() {
        return (Vec::new(), 0);
    }
    let aligned = (0..m).map(|i| refs[i % refs.len()].clone()).collect();
    (aligned, refs.len().saturating_sub(m))
}

/// Result of [`match_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    pub loss: f64,
    pub assignment: Assignment,
    /// Per-prediction gradients, flattened like [`Trajectory::flatten`].
    pub grads: Vec<Vec<f64>>,
    /// References dropped because there were more than predictions.
    pub dropped_refs: usize,
}

/// Mean matched squared distance between predictions and references under the
/// optimal assignment, with its gradient (the assignment held fixed).
pub fn match_loss(preds: &[Trajectory], refs: &[Trajectory]) -> Result<MatchOutput> {
    if preds.is_empty() || refs.is_empty() {
        return Err(Error::InvalidBatch("match loss needs predictions and references".into()));
    }
    let m = preds.len();
    let t = preds[0].len();
    if preds.iter().chain(refs).any(|p| p.len() != t) {
        return Err(Error::InvalidBatch("all trajectories must share one horizon".into()));
    }
    let (refs, dropped_refs) = align_refs(refs, m);
    let cost: Vec<Vec<f64>> = preds.iter().map(|p| refs.iter().map(|r| p.squared_distance(r)).collect()).collect();
    let assignment = hungarian(&cost)?;
    let loss = assignment.total_cost / m as f64;
    let grads = preds
        .iter()
        .zip(&assignment.perm)
        .map(|(p, &j)| {
            p.flatten().iter().zip(refs[j].flatten()).map(|(a, b)| 2.0 * (a - b) / m as f64).collect()
        })
        .collect();
    Ok(MatchOutput { loss, assignment, grads, dropped_refs })
}

/// Mean over modes of the l1 distance to a single target, with its gradient.
/// This is the single-expert imitation baseline.
pub fn l1_loss(preds: &[Trajectory], target: &Trajectory) -> Result<(f64, Vec<Vec<f64>>)> {
    if preds.is_empty() {
        return Err(Error::InvalidBatch("l1 loss needs predictions".into()));
    }
    if preds.iter().any(|p| p.len() != target.len()) {
        return Err(Error::InvalidBatch("all trajectories must share one horizon".into()));
    }
    let m = preds.len() as f64;
    let tgt = target.flatten();
    let mut loss = 0.0;
    let grads = preds
        .iter()
        .map(|p| {
            p.flatten()
                .iter()
                .zip(&tgt)
                .map(|(a, b)| {
                    loss += (a - b).abs() / m;
                    (a - b).signum() * f64::from(u8::from(a != b)) / m
                })
                .collect()
        })
        .collect();
    Ok((loss, grads))
}
