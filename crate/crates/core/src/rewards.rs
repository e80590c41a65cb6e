//! Diversity and safety rewards, group-relative advantages, the clipped
//! policy objective, and the combined imitation + RL loss.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scene::SafetyField;
use crate::trajectory::{Trajectory, TrajectorySet};

/// Mean pairwise flattened l2 distance over all mode pairs.
pub fn diversity_reward(set: &TrajectorySet) -> Result<f64> {
    let m = set.len();
    if m < 2 {
        return Err(Error::InvalidGroup(format!("diversity needs at least 2 modes, got {m}")));
    }
    let modes = set.modes();
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += modes[i].distance(&modes[j]);
        }
    }
    Ok(2.0 * sum / (m * (m - 1)) as f64)
}

/// Per-mode share of the diversity reward: each mode's mean distance to the
/// other modes. These average to [`diversity_reward`].
pub fn diversity_credit(set: &TrajectorySet) -> Result<Vec<f64>> {
    let m = set.len();
    if m < 2 {
        return Err(Error::InvalidGroup(format!("diversity needs at least 2 modes, got {m}")));
    }
    let modes = set.modes();
    Ok((0..m)
        .map(|i| {
            (0..m).filter(|&j| j != i).map(|j| modes[i].distance(&modes[j])).sum::<f64>()
                / (m - 1) as f64
        })
        .collect())
}

/// Gradient of [`diversity_reward`] with respect to every waypoint coordinate,
/// laid out like [`Trajectory::flatten`]. Coincident pairs contribute zero.
pub fn diversity_reward_grad(set: &TrajectorySet) -> Result<Vec<Vec<f64>>> {
    let m = set.len();
    if m < 2 {
        return Err(Error::InvalidGroup(format!("diversity needs at least 2 modes, got {m}")));
    }
    let flat: Vec<Vec<f64>> = set.modes().iter().map(Trajectory::flatten).collect();
    let scale = 2.0 / (m * (m - 1)) as f64;
    let mut grads = vec![vec![0.0; flat[0].len()]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = set.modes()[i].distance(&set.modes()[j]);
            if d == 0.0 {
                continue;
            }
            for k in 0..flat[i].len() {
                let g = scale * (flat[i][k] - flat[j][k]) / d;
                grads[i][k] += g;
                grads[j][k] -= g;
            }
        }
    }
    Ok(grads)
}

/// Negative fraction of waypoints whose field value is below `d_thresh`.
pub fn safety_reward(traj: &Trajectory, field: &SafetyField, d_thresh: f64) -> Result<f64> {
    if !(d_thresh > 0.0) {
        return Err(Error::Config(format!("d_thresh {d_thresh} must be > 0")));
    }
    let violations = traj
        .points()
        .iter()
        .filter(|&&p| field.query(p).distance < d_thresh)
        .count();
    Ok(-(violations as f64) / traj.len() as f64)
}

/// Reward terms for one mode set.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    /// Set-level diversity, shared by every mode.
    pub r_div: f64,
    /// Per-mode safety rewards in `[-1, 0]`.
    pub r_safe: Vec<f64>,
    /// Per-mode totals `r_div + lambda_safe * r_safe[m]`.
    pub totals: Vec<f64>,
    /// Per-mode diversity credit (mean distance to the other modes).
    pub div_credit: Vec<f64>,
}

impl RewardBreakdown {
    pub fn mean_safety(&self) -> f64 {
        self.r_safe.iter().sum::<f64>() / self.r_safe.len() as f64
    }

    /// Per-mode totals that credit each mode with its own diversity share.
    pub fn credited_totals(&self, lambda_safe: f64) -> Vec<f64> {
        self.div_credit
            .iter()
            .zip(&self.r_safe)
            .map(|(d, s)| d + lambda_safe * s)
            .collect()
    }

    /// Index of the highest-total mode; ties go to the lowest index.
    pub fn best_mode(&self) -> usize {
        self.totals
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.totals[best] { i } else { best })
    }
}

pub fn total_reward(
    set: &TrajectorySet,
    field: &SafetyField,
    lambda_safe: f64,
    d_thresh: f64,
) -> Result<RewardBreakdown> {
    let r_div = diversity_reward(set)?;
    let div_credit = diversity_credit(set)?;
    let r_safe = set
        .modes()
        .iter()
        .map(|t| safety_reward(t, field, d_thresh))
        .collect::<Result<Vec<_>>>()?;
    let totals = r_safe.iter().map(|s| r_div + lambda_safe * s).collect();
    Ok(RewardBreakdown { r_div, r_safe, totals, div_credit })
}

/// Per-mode rewards of `sampled` measured against a control variate: mode
/// `m`'s credited total minus the total it would get at `means[m]`, with the
/// other sampled modes unchanged. The subtracted term does not depend on
/// mode `m`'s own perturbation, so policy-gradient estimates stay unbiased.
pub fn baselined_rewards(
    sampled: &TrajectorySet,
    means: &[Trajectory],
    field: &SafetyField,
    lambda_safe: f64,
    d_thresh: f64,
) -> Result<Vec<f64>> {
    let m = sampled.len();
    if m < 2 {
        return Err(Error::InvalidGroup(format!("diversity needs at least 2 modes, got {m}")));
    }
    if means.len() != m {
        return Err(Error::InvalidBatch("one mean per sampled mode is required".into()));
    }
    let modes = sampled.modes();
    let credit = |x: &Trajectory, i: usize| {
        (0..m).filter(|&j| j != i).map(|j| x.distance(&modes[j])).sum::<f64>() / (m - 1) as f64
    };
    (0..m)
        .map(|i| {
            let div = credit(&modes[i], i) - credit(&means[i], i);
            let safe = safety_reward(&modes[i], field, d_thresh)? - safety_reward(&means[i], field, d_thresh)?;
            Ok(div + lambda_safe * safe)
        })
        .collect()
}

/// Floor on the group standard deviation when scaling advantages.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-6;

/// Group-relative advantages: rewards minus the group mean, optionally divided
/// by the group standard deviation (population form, floored).
pub fn grpo_advantages(rewards: &[f64], scale_by_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "group-relative advantages need at least 2 members, got {}",
            rewards.len()
        )));
    }
    Ok(centered(rewards, scale_by_std))
}

fn centered(rewards: &[f64], scale_by_std: bool) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if scale_by_std {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt().max(ADVANTAGE_STD_FLOOR);
        adv.iter_mut().for_each(|a| *a /= std);
    }
    adv
}

/// Batch-baseline advantages for the PPO-style variant: the same centring and
/// scaling, but over a whole minibatch rather than within one scene's modes.
pub fn batch_advantages(rewards: &[f64], scale_by_std: bool) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidBatch("empty reward batch".into()));
    }
    if rewards.len() == 1 {
        return Ok(vec![0.0]);
    }
    Ok(centered(rewards, scale_by_std))
}

/// One group's worth of policy-gradient inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoBatch {
    pub rewards: Vec<f64>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GrpoBatch {
    pub fn new(rewards: Vec<f64>, logp_new: Vec<f64>, logp_old: Vec<f64>, scale_by_std: bool) -> Result<Self> {
        let advantages = grpo_advantages(&rewards, scale_by_std)?;
        Self::with_advantages(rewards, logp_new, logp_old, advantages)
    }

    pub fn with_advantages(
        rewards: Vec<f64>,
        logp_new: Vec<f64>,
        logp_old: Vec<f64>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        let n = rewards.len();
        if logp_new.len() != n || logp_old.len() != n || advantages.len() != n {
            return Err(Error::InvalidBatch("group fields must have equal length".into()));
        }
        if logp_new.iter().chain(&logp_old).any(|l| !l.is_finite()) {
            return Err(Error::InvalidBatch("non-finite log-probability".into()));
        }
        Ok(Self { rewards, logp_new, logp_old, advantages })
    }
}

/// Clipped ratio objective averaged over the group. Returns the loss and its
/// gradient with respect to each `logp_new`. `clip_eps = None` drops the
/// clipping and uses the bare ratio-weighted advantage.
pub fn grpo_loss(batch: &GrpoBatch, clip_eps: Option<f64>) -> (f64, Vec<f64>) {
    let n = batch.advantages.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.advantages.len());
    for ((&lp_new, &lp_old), &adv) in batch.logp_new.iter().zip(&batch.logp_old).zip(&batch.advantages) {
        let ratio = (lp_new - lp_old).exp();
        let unclipped = ratio * adv;
        let (term, dterm_dratio) = match clip_eps {
            Some(eps) => {
                let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                let clipped = clipped_ratio * adv;
                if unclipped <= clipped {
                    (unclipped, adv)
                } else {
                    // The clipped branch is constant in the ratio outside the band.
                    let inside = (1.0 - eps..=1.0 + eps).contains(&ratio);
                    (clipped, if inside { adv } else { 0.0 })
                }
            }
            None => (unclipped, adv),
        };
        loss -= term / n;
        grads.push(-dterm_dratio * ratio / n);
    }
    (loss, grads)
}

/// Isotropic Gaussian log-density of `sampled` around `mean` (shared sigma).
pub fn policy_logprob(sampled: &Trajectory, mean: &Trajectory, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    if sampled.len() != mean.len() {
        return Err(Error::InvalidPair("sample and mean lengths differ".into()));
    }
    let coords = 2.0 * sampled.len() as f64;
    let quad = sampled.squared_distance(mean) / (2.0 * sigma * sigma);
    Ok(-quad - coords * (sigma.ln() + 0.5 * (2.0 * PI).ln()))
}

/// Gradient of [`policy_logprob`] with respect to the mean, flattened.
pub fn policy_logprob_grad_mean(sampled: &Trajectory, mean: &Trajectory, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok(sampled
        .flatten()
        .iter()
        .zip(mean.flatten())
        .map(|(s, m)| (s - m) / (sigma * sigma))
        .collect())
}

/// `lambda_match * match + lambda_rl * rl`.
pub fn total_loss(match_loss: f64, rl_loss: f64, lambda_match: f64, lambda_rl: f64) -> f64 {
    lambda_match * match_loss + lambda_rl * rl_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Waypoint;
    use proptest::prelude::*;

    fn t1(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(points.iter().map(|&(x, y)| Waypoint::new(x, y)).collect(), 0.5).unwrap()
    }

    fn set(modes: Vec<Trajectory>) -> TrajectorySet {
        TrajectorySet::new("s", modes).unwrap()
    }

    fn field(value: f64) -> SafetyField {
        SafetyField { origin: Waypoint::new(-50.0, -50.0), cell_size: 100.0, rows: vec![vec![value; 2]; 2] }
    }

    #[test]
    fn diversity_examples() {
        let same = set(vec![t1(&[(1.0, 2.0)]); 4]);
        assert_eq!(diversity_reward(&same).unwrap(), 0.0);
        let pair = set(vec![t1(&[(0.0, 0.0)]), t1(&[(3.0, 4.0)])]);
        assert_eq!(diversity_reward(&pair).unwrap(), 5.0);
        let three = set(vec![t1(&[(0.0, 0.0)]), t1(&[(1.0, 0.0)]), t1(&[(2.0, 0.0)])]);
        assert!((diversity_reward(&three).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!(diversity_reward(&set(vec![t1(&[(0.0, 0.0)])])).is_err());
    }

    #[test]
    fn credit_averages_to_set_reward() {
        let three = set(vec![t1(&[(0.0, 0.0)]), t1(&[(1.0, 0.0)]), t1(&[(2.0, 5.0)])]);
        let credit = diversity_credit(&three).unwrap();
        let mean = credit.iter().sum::<f64>() / 3.0;
        assert!((mean - diversity_reward(&three).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn baselined_rewards_measure_the_perturbation() {
        let means = vec![t1(&[(0.0, 0.0)]), t1(&[(4.0, 0.0)])];
        let unmoved = baselined_rewards(&set(means.clone()), &means, &field(10.0), 1.0, 0.5).unwrap();
        assert_eq!(unmoved, vec![0.0, 0.0]);
        // Mode 0 moves 1 m away from mode 1; mode 1 stays on its mean.
        let sampled = set(vec![t1(&[(-1.0, 0.0)]), t1(&[(4.0, 0.0)])]);
        let r = baselined_rewards(&sampled, &means, &field(10.0), 1.0, 0.5).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        // Inside the margin every waypoint violates, sampled or not.
        let r = baselined_rewards(&sampled, &means, &field(0.1), 3.0, 0.5).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert!(baselined_rewards(&sampled, &means[..1], &field(1.0), 1.0, 0.5).is_err());
    }

    #[test]
    fn safety_examples() {
        let traj = t1(&[(0.0, 0.0); 6]);
        assert_eq!(safety_reward(&traj, &field(5.0), 0.5).unwrap(), 0.0);
        assert_eq!(safety_reward(&traj, &field(0.1), 0.5).unwrap(), -1.0);
        // Field that is 0 on the left column and 10 on the right: x < 0 is
        // close to obstacles.
        let split = SafetyField {
            origin: Waypoint::new(-1.0, -1.0),
            cell_size: 2.0,
            rows: vec![vec![0.0, 10.0], vec![0.0, 10.0]],
        };
        let mixed = t1(&[(-1.0, 0.0), (-1.0, 0.5), (1.0, 0.0), (1.0, 0.5), (1.0, -0.5), (0.9, 0.0)]);
        let oracle = mixed.points().iter().filter(|&&p| split.query(p).distance < 0.5).count();
        assert_eq!(oracle, 2);
        assert!((safety_reward(&mixed, &split, 0.5).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!(safety_reward(&traj, &field(1.0), 0.0).is_err());
    }

    #[test]
    fn total_reward_examples() {
        let pair = set(vec![t1(&[(0.0, 0.0)]), t1(&[(3.0, 4.0)])]);
        let b = total_reward(&pair, &field(5.0), 0.0, 0.5).unwrap();
        assert_eq!(b.totals, vec![b.r_div; 2]);

        let same = set(vec![t1(&[(1.0, 1.0)]); 3]);
        let b = total_reward(&same, &field(5.0), 1.0, 0.5).unwrap();
        assert_eq!(b.totals, vec![0.0; 3]);

        // Mode 0 sits on an obstacle, mode 1 is clear.
        let split = SafetyField {
            origin: Waypoint::new(0.0, 0.0),
            cell_size: 3.0,
            rows: vec![vec![0.0, 9.0], vec![9.0, 9.0]],
        };
        let b = total_reward(&set(vec![t1(&[(3.0, 4.0)]), t1(&[(0.0, 0.0)])]), &split, 2.0, 0.5).unwrap();
        assert_eq!(b.r_safe, vec![0.0, -1.0]);
        assert_eq!(b.totals, vec![5.0, 3.0]);
        assert_eq!(b.best_mode(), 0);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(grpo_advantages(&[1.0, 2.0, 3.0], false).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(grpo_advantages(&[2.0, 2.0, 2.0], true).unwrap(), vec![0.0; 3]);
        assert_eq!(grpo_advantages(&[0.0, 4.0], true).unwrap(), vec![-1.0, 1.0]);
        assert!(grpo_advantages(&[1.0], true).is_err());
        assert_eq!(batch_advantages(&[3.0], true).unwrap(), vec![0.0]);
    }

    #[test]
    fn grpo_loss_examples() {
        let batch = GrpoBatch::new(vec![1.0, 2.0, 6.0], vec![-1.0, -2.0, -0.5], vec![-1.0, -2.0, -0.5], true).unwrap();
        let (loss, _) = grpo_loss(&batch, Some(0.2));
        assert!(loss.abs() < 1e-12);

        let zero = GrpoBatch::with_advantages(vec![0.0; 2], vec![0.3, -0.2], vec![0.0, 0.0], vec![0.0; 2]).unwrap();
        let (loss, g) = grpo_loss(&zero, Some(0.2));
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        let single = GrpoBatch::with_advantages(vec![1.0], vec![1.5f64.ln()], vec![0.0], vec![1.0]).unwrap();
        let (loss, g) = grpo_loss(&single, Some(0.2));
        assert!((loss + 1.2).abs() < 1e-12);
        assert_eq!(g, vec![0.0]);
        let (loss, _) = grpo_loss(&single, None);
        assert!((loss + 1.5).abs() < 1e-12);
    }

    #[test]
    fn grpo_loss_gradient_matches_finite_differences() {
        let base = GrpoBatch::with_advantages(
            vec![0.0; 4],
            vec![0.05, -0.1, 0.3, -0.4],
            vec![0.0; 4],
            vec![1.0, -0.5, 0.7, -1.2],
        )
        .unwrap();
        let (_, g) = grpo_loss(&base, Some(0.2));
        let h = 1e-6;
        for i in 0..4 {
            let mut p = base.clone();
            p.logp_new[i] += h;
            let mut m = base.clone();
            m.logp_new[i] -= h;
            let fd = (grpo_loss(&p, Some(0.2)).0 - grpo_loss(&m, Some(0.2)).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn logprob_examples() {
        let mean = t1(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)]);
        let sigma = 0.3;
        let lp = policy_logprob(&mean, &mean, sigma).unwrap();
        let expected = -6.0 * (sigma.ln() + 0.5 * (2.0 * PI).ln());
        assert!((lp - expected).abs() < 1e-12);
        let lp2 = policy_logprob(&mean, &mean, 2.0 * sigma).unwrap();
        assert!((lp - lp2 - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(policy_logprob(&mean, &mean, 0.0), Err(Error::InvalidSigma(_))));
    }

    #[test]
    fn logprob_gradient_matches_finite_differences() {
        let sampled = t1(&[(1.1, 2.3), (2.7, 4.4)]);
        let mean = t1(&[(1.0, 2.0), (3.0, 4.0)]);
        let sigma = 0.3;
        let g = policy_logprob_grad_mean(&sampled, &mean, sigma).unwrap();
        let h = 1e-5;
        let flat = mean.flatten();
        for k in 0..flat.len() {
            let mut p = flat.clone();
            p[k] += h;
            let mut m = flat.clone();
            m[k] -= h;
            let lp = |v: &[f64]| policy_logprob(&sampled, &Trajectory::from_flat(v, 0.5).unwrap(), sigma).unwrap();
            let fd = (lp(&p) - lp(&m)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 4.0, 1.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0, 1.0), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 1.0, 0.5), 4.0);
    }

    #[test]
    fn diversity_ascent_step_increases_reward() {
        let s = set(vec![t1(&[(0.0, 0.0), (1.0, 0.2)]), t1(&[(0.5, 0.1), (1.5, 0.0)]), t1(&[(0.2, -0.3), (0.9, 0.4)])]);
        let before = diversity_reward(&s).unwrap();
        let g = diversity_reward_grad(&s).unwrap();
        let stepped: Vec<Trajectory> = s
            .modes()
            .iter()
            .zip(&g)
            .map(|(t, gi)| {
                let v: Vec<f64> = t.flatten().iter().zip(gi).map(|(x, d)| x + 1e-3 * d).collect();
                Trajectory::from_flat(&v, 0.5).unwrap()
            })
            .collect();
        assert!(diversity_reward(&set(stepped)).unwrap() > before);
    }

    fn arb_set() -> impl Strategy<Value = Vec<Vec<(f64, f64)>>> {
        prop::collection::vec(prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 3), 2..7)
    }

    proptest! {
        #[test]
        fn diversity_invariances(modes in arb_set(), shift in (-5.0f64..5.0, -5.0f64..5.0), rot in 0usize..7) {
            let trajs: Vec<Trajectory> = modes.iter().map(|m| t1(m)).collect();
            let base = diversity_reward(&set(trajs.clone())).unwrap();
            let mut rotated = trajs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            prop_assert!((diversity_reward(&set(rotated)).unwrap() - base).abs() < 1e-9);
            let shifted: Vec<Trajectory> = trajs.iter()
                .map(|t| t.map(|p| p + Waypoint::new(shift.0, shift.1))).collect();
            prop_assert!((diversity_reward(&set(shifted)).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn safety_monotone_in_threshold(pts in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 6), lo in 0.01f64..3.0, extra in 0.0f64..3.0) {
            let f = SafetyField {
                origin: Waypoint::new(-4.0, -4.0),
                cell_size: 2.0,
                rows: (0..5).map(|r| (0..5).map(|c| (r * 5 + c) as f64 * 0.2).collect()).collect(),
            };
            let t = t1(&pts);
            prop_assert!(safety_reward(&t, &f, lo).unwrap() >= safety_reward(&t, &f, lo + extra).unwrap());
        }

        #[test]
        fn centered_advantages_sum_to_zero(r in prop::collection::vec(-100.0f64..100.0, 2..12), scale in any::<bool>()) {
            let a = grpo_advantages(&r, scale).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        }

        #[test]
        fn unit_ratio_gives_zero_loss(r in prop::collection::vec(-10.0f64..10.0, 2..8), lp in -5.0f64..0.0) {
            let n = r.len();
            let b = GrpoBatch::new(r, vec![lp; n], vec![lp; n], true).unwrap();
            prop_assert!(grpo_loss(&b, Some(0.2)).0.abs() <= 1e-12);
            prop_assert!(grpo_loss(&b, None).0.abs() <= 1e-12);
        }
    }
}
