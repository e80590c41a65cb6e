//! Anchor trajectories as k-means centres over corpus experts.

use rand::Rng;

use super::Scene;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::trajectory::Trajectory;

const MAX_ITERS: usize = 200;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `m` anchors from k-means (k-means++ seeding, Lloyd iterations) over the
/// flattened expert trajectories of `corpus`. Deterministic for a fixed seed.
pub fn generate_anchors(corpus: &[Scene], m: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if corpus.is_empty() || m == 0 {
        return Err(Error::InsufficientData("anchors need a non-empty corpus and m >= 1".into()));
    }
    if corpus.len() < m {
        return Err(Error::InsufficientData(format!(
            "corpus of {} scenes cannot yield {m} anchors",
            corpus.len()
        )));
    }
    let dt = corpus[0].gt.dt();
    let points: Vec<Vec<f64>> = corpus.iter().map(|s| s.gt.flatten()).collect();
    let centres = kmeans(&points, m, seed)?;
    centres.iter().map(|c| Trajectory::from_flat(c, dt)).collect()
}

pub(crate) fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(seed, 0, 0);
    let n = points.len();

    // k-means++ seeding.
    let mut centres: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "only {} distinct trajectories for {k} anchors",
                centres.len()
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in nearest.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if nearest[pick] == 0.0 {
            pick = nearest
                .iter()
                .enumerate()
                .fold(0, |best, (i, &d)| if d > nearest[best] { i } else { best });
        }
        centres.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, centres.last().unwrap()));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centres[a]).total_cmp(&sq_dist(p, &centres[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster with the point farthest from its centre.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centres[assign[a]])
                            .total_cmp(&sq_dist(&points[b], &centres[assign[b]]))
                    })
                    .unwrap();
                centres[c] = points[far].clone();
                assign[far] = c;
            } else {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(centres)
}
