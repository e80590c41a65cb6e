//! Evaluation metrics: per-timestamp diversity, collision rate, average l2,
//! and the mode-covariance collapse diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SafetyField;
use crate::trajectory::{Trajectory, TrajectorySet};

/// Small constant in the diversity denominator.
pub const DIV_EPS: f64 = 1e-6;

/// Mean pairwise distance between the modes' waypoints at `t_index`, divided
/// by the mean waypoint magnitude there and clamped to 1.
pub fn diversity_metric(set: &TrajectorySet, t_index: usize) -> Result<f64> {
    let m = set.len();
    if m < 2 {
        return Err(Error::InvalidSet(format!("diversity needs at least 2 modes, got {m}")));
    }
    if t_index >= set.horizon() {
        return Err(Error::InvalidSet(format!("t_index {t_index} beyond horizon {}", set.horizon())));
    }
    let pts: Vec<_> = set.modes().iter().map(|t| t.points()[t_index]).collect();
    let mut raw = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            raw += pts[i].dist(pts[j]);
        }
    }
    raw *= 2.0 / (m * (m - 1)) as f64;
    let magnitude = pts.iter().map(|p| p.norm()).sum::<f64>() / m as f64;
    Ok((raw / (DIV_EPS + magnitude)).min(1.0))
}

/// [`diversity_metric`] at every timestamp.
pub fn diversity_profile(set: &TrajectorySet) -> Result<Vec<f64>> {
    (0..set.horizon()).map(|t| diversity_metric(set, t)).collect()
}

/// Per-timestamp collision fractions and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionRates {
    pub at: Vec<f64>,
    pub avg: f64,
}

/// Fraction of scenes whose chosen trajectory is within `d_thresh` of an
/// obstacle, per timestamp.
pub fn collision_rate(trajs: &[Trajectory], fields: &[&SafetyField], d_thresh: f64) -> Result<CollisionRates> {
    if trajs.is_empty() {
        return Err(Error::InvalidCorpus("collision rate needs at least one scene".into()));
    }
    if trajs.len() != fields.len() {
        return Err(Error::InvalidCorpus(format!(
            "{} trajectories but {} safety fields",
            trajs.len(),
            fields.len()
        )));
    }
    let horizon = trajs[0].len();
    if trajs.iter().any(|t| t.len() != horizon) {
        return Err(Error::InvalidCorpus("trajectories must share one horizon".into()));
    }
    let n = trajs.len() as f64;
    let at: Vec<f64> = (0..horizon)
        .map(|t| {
            trajs
                .iter()
                .zip(fields)
                .filter(|(traj, f)| f.query(traj.points()[t]).distance < d_thresh)
                .count() as f64
                / n
        })
        .collect();
    let avg = at.iter().sum::<f64>() / horizon as f64;
    Ok(CollisionRates { at, avg })
}

/// Mean per-timestamp Euclidean distance.
pub fn avg_l2(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidPair(format!("lengths {} and {} differ", pred.len(), gt.len())));
    }
    Ok(pred.points().iter().zip(gt.points()).map(|(a, b)| a.dist(*b)).sum::<f64>() / pred.len() as f64)
}

/// Trace of the mode covariance and the mean mode (flattened space).
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseDiagnostic {
    pub trace: f64,
    pub mean: Trajectory,
}

fn mode_mean(set: &TrajectorySet) -> Vec<f64> {
    let m = set.len() as f64;
    let mut mean = vec![0.0; 2 * set.horizon()];
    for t in set.modes() {
        for (acc, v) in mean.iter_mut().zip(t.flatten()) {
            *acc += v / m;
        }
    }
    mean
}

/// Population covariance of the modes around their mean, reported by trace.
pub fn collapse_diagnostic(set: &TrajectorySet) -> Result<CollapseDiagnostic> {
    if set.len() < 2 {
        return Err(Error::InvalidSet("collapse diagnostic needs at least 2 modes".into()));
    }
    let mean = mode_mean(set);
    let m = set.len() as f64;
    let trace = set
        .modes()
        .iter()
        .map(|t| t.flatten().iter().zip(&mean).map(|(v, mu)| (v - mu) * (v - mu)).sum::<f64>())
        .sum::<f64>()
        / m;
    let dt = set.modes()[0].dt();
    Ok(CollapseDiagnostic { trace, mean: Trajectory::from_flat_unchecked(&mean, dt) })
}

/// Trace of the cross form `E[(tau - mu)(gt - mu)^T]`, which pairs each mode's
/// deviation with the expert's deviation from the same mode mean. Unlike the
/// mode covariance it can be negative.
pub fn collapse_cross_trace(set: &TrajectorySet, gt: &Trajectory) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::InvalidSet("collapse diagnostic needs at least 2 modes".into()));
    }
    if gt.len() != set.horizon() {
        return Err(Error::InvalidPair("expert horizon differs from the mode horizon".into()));
    }
    let mean = mode_mean(set);
    let g: Vec<f64> = gt.flatten().iter().zip(&mean).map(|(v, mu)| v - mu).collect();
    let m = set.len() as f64;
    Ok(set
        .modes()
        .iter()
        .map(|t| t.flatten().iter().zip(&mean).zip(&g).map(|((v, mu), gd)| (v - mu) * gd).sum::<f64>())
        .sum::<f64>()
        / m)
}

/// Corpus-level evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Corpus-mean diversity at each timestamp.
    pub div_at: Vec<f64>,
    pub div_avg: f64,
    pub collision_at: Vec<f64>,
    pub collision_avg: f64,
    /// Mean over scenes of the chosen mode's average l2 to the expert.
    pub avg_l2: f64,
    /// Mean over scenes of the mode-covariance trace (m^2).
    pub collapse_trace: f64,
    /// Mean over scenes of the cross-form trace against the expert (m^2).
    pub collapse_cross_trace: f64,
}

/// One scene's contribution to a [`MetricReport`].
#[derive(Debug, Clone)]
pub struct SceneEval<'a> {
    pub set: &'a TrajectorySet,
    pub chosen: usize,
    pub gt: &'a Trajectory,
    pub field: &'a SafetyField,
}

impl MetricReport {
    pub fn compute(scenes: &[SceneEval<'_>], d_thresh: f64) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidCorpus("cannot evaluate an empty corpus".into()));
        }
        let n = scenes.len() as f64;
        let horizon = scenes[0].set.horizon();
        let mut div_at = vec![0.0; horizon];
        let mut l2 = 0.0;
        let mut trace = 0.0;
        let mut cross = 0.0;
        for s in scenes {
            for (acc, v) in div_at.iter_mut().zip(diversity_profile(s.set)?) {
                *acc += v / n;
            }
            l2 += avg_l2(&s.set.modes()[s.chosen], s.gt)? / n;
            trace += collapse_diagnostic(s.set)?.trace / n;
            cross += collapse_cross_trace(s.set, s.gt)? / n;
        }
        let chosen: Vec<Trajectory> = scenes.iter().map(|s| s.set.modes()[s.chosen].clone()).collect();
        let fields: Vec<&SafetyField> = scenes.iter().map(|s| s.field).collect();
        let col = collision_rate(&chosen, &fields, d_thresh)?;
        let div_avg = div_at.iter().sum::<f64>() / horizon as f64;
        Ok(Self {
            div_at,
            div_avg,
            collision_at: col.at,
            collision_avg: col.avg,
            avg_l2: l2,
            collapse_trace: trace,
            collapse_cross_trace: cross,
        })
    }

    /// Diversity at 1 s, 2 s and 3 s and the mean of those three, or `None`
    /// when the horizon does not reach a column.
    pub fn div_table_row(&self, dt: f64) -> [Option<f64>; 4] {
        let at = |secs: f64| {
            let idx = (secs / dt).round() as usize;
            idx.checked_sub(1).and_then(|i| self.div_at.get(i).copied())
        };
        let cols = [at(1.0), at(2.0), at(3.0)];
        let avg = if cols.iter().all(Option::is_some) {
            Some(cols.iter().flatten().sum::<f64>() / 3.0)
        } else {
            None
        };
        [cols[0], cols[1], cols[2], avg]
    }
}
