//! Noise schedules, the closed-form forward process, and a deterministic
//! (eta = 0) reverse sampler started from noised anchors.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::trajectory::{denormalize, normalize, Trajectory, TrajectorySet, Waypoint};

/// Default number of diffusion steps.
pub const DEFAULT_NUM_STEPS: usize = 50;
/// Default number of reverse steps; sampling starts at step `DEFAULT_TRUNCATION - 1`.
pub const DEFAULT_TRUNCATION: usize = 10;
/// Default meters-per-unit of the normalized trajectory space.
pub const DEFAULT_SCALE: f64 = 30.0;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.2;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        self.alpha_bars[step]
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self { kind, betas, alphas, alpha_bars }
    }
}

pub fn make_schedule(num_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {num_steps}")));
    }
    let n = num_steps as f64;
    let betas = match kind {
        ScheduleKind::Linear => (0..num_steps)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (n - 1.0))
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / n + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0).cos().powi(2);
            (0..num_steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(COSINE_MAX_BETA))
                .collect()
        }
    };
    Ok(NoiseSchedule::from_betas(kind, betas))
}

/// A forward-noised trajectory together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedTrajectory {
    pub values: Trajectory,
    pub step: usize,
    pub eps: Vec<f64>,
}

/// `sqrt(abar_t) * traj + sqrt(1 - abar_t) * eps`, with one standard normal
/// per coordinate.
pub fn forward_noise<R: Rng + ?Sized>(
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    step: usize,
    rng: &mut R,
) -> Result<NoisedTrajectory> {
    let eps: Vec<f64> = (0..2 * traj.len()).map(|_| rng.sample(StandardNormal)).collect();
    forward_noise_with(traj, schedule, step, eps)
}

/// [`forward_noise`] with a caller-supplied `eps`.
pub fn forward_noise_with(
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    step: usize,
    eps: Vec<f64>,
) -> Result<NoisedTrajectory> {
    if step >= schedule.num_steps() {
        return Err(Error::InvalidSchedule(format!(
            "step {step} out of range for {} steps",
            schedule.num_steps()
        )));
    }
    if eps.len() != 2 * traj.len() {
        return Err(Error::InvalidTrajectory(format!(
            "noise has {} coordinates, trajectory has {}",
            eps.len(),
            2 * traj.len()
        )));
    }
    let ab = schedule.alpha_bar(step);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pts = traj
        .points()
        .iter()
        .zip(eps.chunks_exact(2))
        .map(|(p, e)| Waypoint::new(a * p.x + b * e[0], a * p.y + b * e[1]))
        .collect();
    Ok(NoisedTrajectory { values: Trajectory::from_points(pts, traj.dt()), step, eps })
}

/// Anything that maps noisy normalized mode trajectories at a diffusion step
/// to clean-trajectory estimates for one scene.
pub trait CleanPredictor {
    type Context;

    fn context(&self, scene: &Scene) -> Result<Self::Context>;

    /// One estimate per mode; `noisy[m]` is mode `m`'s current sample.
    fn predict_clean(&self, ctx: &Self::Context, noisy: &[Trajectory], step: usize) -> Result<Vec<Trajectory>>;
}

/// Predicts the noisy input itself. Useful as a sampler test stub.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl CleanPredictor for IdentityPredictor {
    type Context = ();

    fn context(&self, _scene: &Scene) -> Result<()> {
        Ok(())
    }

    fn predict_clean(&self, _ctx: &(), noisy: &[Trajectory], _step: usize) -> Result<Vec<Trajectory>> {
        Ok(noisy.to_vec())
    }
}

/// Reverse-step indices for `num_denoise_steps` steps: `n-1, n-2, ..., 0`.
pub fn denoise_steps(num_denoise_steps: usize) -> Vec<usize> {
    (0..num_denoise_steps).rev().collect()
}

/// Sampler settings shared by training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub scale: f64,
}

impl SamplerConfig {
    pub fn new(num_steps: usize, kind: ScheduleKind, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidScale(scale));
        }
        Ok(Self { schedule: make_schedule(num_steps, kind)?, scale })
    }
}

/// Draws `m` modes for `scene`. Each mode starts from its anchor noised to
/// step `num_denoise_steps - 1`, then alternates clean prediction with a
/// deterministic re-noise to the next lower step. With zero steps the anchors
/// are returned unchanged. Anchors are cycled when `m` exceeds their count.
pub fn sample<P: CleanPredictor, R: Rng + ?Sized>(
    predictor: &P,
    cfg: &SamplerConfig,
    scene: &Scene,
    m: usize,
    num_denoise_steps: usize,
    rng: &mut R,
) -> Result<TrajectorySet> {
    if scene.anchors.is_empty() {
        return Err(Error::MissingAnchors(scene.id.clone()));
    }
    if num_denoise_steps > cfg.schedule.num_steps() {
        return Err(Error::InvalidSchedule(format!(
            "{num_denoise_steps} denoise steps exceed the {}-step schedule",
            cfg.schedule.num_steps()
        )));
    }
    let anchors: Vec<Trajectory> = (0..m).map(|i| scene.anchors[i % scene.anchors.len()].clone()).collect();
    if num_denoise_steps == 0 {
        return TrajectorySet::new(scene.id.clone(), anchors);
    }
    let ctx = predictor.context(scene)?;
    let steps = denoise_steps(num_denoise_steps);
    let mut x = anchors
        .iter()
        .map(|a| Ok(forward_noise(&normalize(a, cfg.scale)?, &cfg.schedule, steps[0], rng)?.values))
        .collect::<Result<Vec<_>>>()?;
    let mut clean = x.clone();
    for (i, &t) in steps.iter().enumerate() {
        clean = predictor.predict_clean(&ctx, &x, t)?;
        if let Some(&next) = steps.get(i + 1) {
            x = x.iter().zip(&clean).map(|(xt, x0)| ddim_step(&cfg.schedule, xt, x0, t, next)).collect();
        }
    }
    let modes = clean
        .iter()
        .map(|c| {
            if !c.is_finite() {
                return Err(Error::InvalidTrajectory("sampler produced a non-finite trajectory".into()));
            }
            let out = denormalize(c, cfg.scale)?;
            out.validate().map_err(|e| {
                Error::InvalidTrajectory(format!("sampler output rejected, the network has likely diverged: {e}"))
            })?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectorySet::new(scene.id.clone(), modes)
}

/// Deterministic move from step `t` to step `next < t` given a clean estimate.
pub fn ddim_step(schedule: &NoiseSchedule, xt: &Trajectory, x0: &Trajectory, t: usize, next: usize) -> Trajectory {
    let ab = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(next);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pts = xt
        .points()
        .iter()
        .zip(x0.points())
        .map(|(&p, &c)| {
            let eps = (p - c * sa) * (1.0 / sb);
            c * ab_next.sqrt() + eps * (1.0 - ab_next).sqrt()
        })
        .collect();
    Trajectory::from_points(pts, xt.dt())
}
