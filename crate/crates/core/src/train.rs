//! Training loop: one-step clean prediction from noised anchors, imitation
//! (plain L1 or Hungarian-matched) plus an optional policy-gradient term on
//! diversity and safety rewards, optimized with Adam.

use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::denoiser::{Denoiser, SceneCache, SceneContext, SceneInputs};
use crate::diffusion::{forward_noise, SamplerConfig};
use crate::error::{Error, Result};
use crate::matching::{l1_loss, match_loss};
use crate::rewards::{
    baselined_rewards, batch_advantages, grpo_advantages, grpo_loss, policy_logprob, policy_logprob_grad_mean, total_reward, GrpoBatch,
};
use crate::rng::{rng_for, stream};
use crate::scene::Scene;
use crate::trajectory::{normalize, Trajectory, TrajectorySet, Waypoint};

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(net: &Denoiser, lr: f64, clip: f64) -> Self {
        let zeros: Vec<_> = net.store.params().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the accumulated gradients and returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, net: &mut Denoiser) -> f64 {
        let norm = net.store.grad_norm();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in net.store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
        norm
    }
}

/// Parameter-free per-scene training inputs.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub scene: Scene,
    pub inputs: SceneInputs,
    /// Imitation targets in meters: the first `max(k_ref, 1)` references.
    pub refs: Vec<Trajectory>,
}

/// Prepares scenes for training with `k_ref` references each. Zero means the
/// expert alone.
pub fn prepare(scenes: &[Scene], net: &Denoiser, k_ref: usize) -> Result<Vec<TrainScene>> {
    scenes
        .iter()
        .map(|s| {
            let refs = if k_ref == 0 {
                vec![s.gt.clone()]
            } else {
                if s.refs.len() < k_ref {
                    return Err(Error::InsufficientDiversity { requested: k_ref, found: s.refs.len() });
                }
                s.refs[..k_ref].to_vec()
            };
            Ok(TrainScene { scene: s.clone(), inputs: net.scene_inputs(s)?, refs })
        })
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    /// Imitation loss (matched or plain L1, per the configured objective).
    pub l_match: f64,
    pub l_rl: f64,
    /// Mean diversity reward of the predicted mode sets.
    pub r_div: f64,
    /// Mean safety reward of the predicted modes.
    pub r_safe: f64,
    pub grad_norm: f64,
    /// Largest absolute sum of centred advantages over the step's groups.
    pub max_adv_sum: f64,
}

pub const LOG_HEADER: &str = "step,L_match,L_RL,r_div,r_safe,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.l_match, self.l_rl, self.r_div, self.r_safe, self.grad_norm)
    }
}

/// Batch contents written when a step produces a non-finite loss.
#[derive(Debug, Serialize)]
struct NanDump<'a> {
    step: u64,
    scenes: Vec<&'a str>,
    noise_steps: Vec<usize>,
    predictions: Vec<Vec<Vec<f64>>>,
    l_match: f64,
    l_rl: f64,
    grad_norm: f64,
}

struct Pending {
    ctx: SceneContext,
    cache: SceneCache,
    d_out: Vec<Vec<f64>>,
    preds: Vec<Trajectory>,
    sampled: Vec<Trajectory>,
    rewards: Vec<f64>,
    logp: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Denoiser,
    pub adam: Adam,
    pub sampler: SamplerConfig,
    pub scene_hash: String,
    /// Where to write a diagnostic dump if the loss becomes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Denoiser::new(cfg.denoiser(), cfg.seed)?;
        let adam = Adam::new(&net, cfg.lr, cfg.grad_clip);
        let sampler = SamplerConfig::new(cfg.num_steps, cfg.schedule, cfg.scale)?;
        let scene_hash = cfg.scene_hash();
        Ok(Self { cfg, net, adam, sampler, scene_hash, dump_dir: None })
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn steps_per_epoch(&self, n_scenes: usize) -> u64 {
        n_scenes.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self, n_scenes: usize) -> u64 {
        self.steps_per_epoch(n_scenes) * self.cfg.epochs as u64
    }

    /// Scene indices of global step `step`.
    pub fn batch_for(&self, n_scenes: usize, step: u64) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(n_scenes);
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n_scenes).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, stream::SHUFFLE, epoch));
        let start = ((step % per_epoch) as usize) * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(n_scenes)].to_vec()
    }

    /// Trains until the configured number of epochs has been run or `stop_at`
    /// total steps are reached, calling `on_step` after every update.
    pub fn run(&mut self, data: &[TrainScene], stop_at: Option<u64>, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        let end = stop_at.map_or(self.total_steps(data.len()), |s| s.min(self.total_steps(data.len())));
        while self.step() < end {
            let batch = self.batch_for(data.len(), self.step());
            let log = self.train_step(data, &batch)?;
            on_step(&log)?;
        }
        Ok(())
    }

    /// One optimizer update over the scenes at `batch`.
    pub fn train_step(&mut self, data: &[TrainScene], batch: &[usize]) -> Result<StepLog> {
        let cfg = &self.cfg;
        let step = self.adam.t;
        let mut rng = rng_for(cfg.seed, stream::TRAIN_STEP, step);
        let scale = cfg.scale;
        let bsz = batch.len() as f64;
        let rl = cfg.loss.uses_rl();
        self.net.store.zero_grad();

        let mut pending = Vec::with_capacity(batch.len());
        let mut noise_steps = Vec::with_capacity(batch.len());
        let (mut l_im, mut r_div, mut r_safe) = (0.0, 0.0, 0.0);
        for &i in batch {
            let ts = &data[i];
            let t = rng.random_range(0..cfg.truncation);
            noise_steps.push(t);
            let anchors = &ts.scene.anchors;
            if anchors.is_empty() {
                return Err(Error::MissingAnchors(ts.scene.id.clone()));
            }
            let noisy = (0..cfg.modes)
                .map(|m| Ok(forward_noise(&normalize(&anchors[m % anchors.len()], scale)?, &self.sampler.schedule, t, &mut rng)?.values))
                .collect::<Result<Vec<_>>>()?;
            let ctx = self.net.context(&ts.inputs);
            let (out, cache) = self.net.forward(&ctx, &noisy, t)?;
            let dt = noisy[0].dt();
            let preds: Vec<Trajectory> = out
                .flat
                .iter()
                .map(|f| Trajectory::from_flat_unchecked(f, dt).map(|p| p * scale))
                .collect();

            let (loss, grads) = if cfg.loss.uses_matching() {
                let o = match_loss(&preds, &ts.refs)?;
                (o.loss, o.grads)
            } else {
                l1_loss(&preds, &ts.scene.gt)?
            };
            l_im += loss / bsz;
            let d_out = grads
                .iter()
                .map(|g| g.iter().map(|x| cfg.lambda_match * x * scale / bsz).collect())
                .collect();

            let set = TrajectorySet::new(ts.scene.id.clone(), preds.clone())?;
            let rb = total_reward(&set, &ts.scene.safety, cfg.lambda_safe, cfg.d_thresh)?;
            r_div += rb.r_div / bsz;
            r_safe += rb.mean_safety() / bsz;

            let (mut sampled, mut rewards, mut logp) = (Vec::new(), Vec::new(), Vec::new());
            if rl {
                for p in &preds {
                    let pts = p
                        .points()
                        .iter()
                        .map(|&w| {
                            let nx: f64 = rng.sample(StandardNormal);
                            let ny: f64 = rng.sample(StandardNormal);
                            w + Waypoint::new(nx, ny) * cfg.sigma
                        })
                        .collect();
                    let a = Trajectory::from_points(pts, p.dt());
                    logp.push(policy_logprob(&a, p, cfg.sigma)?);
                    sampled.push(a);
                }
                let sset = TrajectorySet::new(ts.scene.id.clone(), sampled.clone())?;
                rewards = if cfg.mode_baseline {
                    baselined_rewards(&sset, &preds, &ts.scene.safety, cfg.lambda_safe, cfg.d_thresh)?
                } else {
                    total_reward(&sset, &ts.scene.safety, cfg.lambda_safe, cfg.d_thresh)?.credited_totals(cfg.lambda_safe)
                };
            }
            pending.push(Pending { ctx, cache, d_out, preds, sampled, rewards, logp });
        }

        let mut l_rl = 0.0;
        let mut max_adv_sum: f64 = 0.0;
        if rl {
            let advantages: Vec<Vec<f64>> = if cfg.loss.group_relative() {
                pending.iter().map(|p| grpo_advantages(&p.rewards, cfg.adv_std)).collect::<Result<_>>()?
            } else {
                let flat: Vec<f64> = pending.iter().flat_map(|p| p.rewards.iter().copied()).collect();
                let adv = batch_advantages(&flat, cfg.adv_std)?;
                max_adv_sum = adv.iter().sum::<f64>().abs();
                adv.chunks(cfg.modes).map(<[f64]>::to_vec).collect()
            };
            let clip = (cfg.clip_eps > 0.0).then_some(cfg.clip_eps);
            for (p, adv) in pending.iter_mut().zip(advantages) {
                if cfg.loss.group_relative() {
                    max_adv_sum = max_adv_sum.max(adv.iter().sum::<f64>().abs());
                }
                let group = GrpoBatch::with_advantages(p.rewards.clone(), p.logp.clone(), p.logp.clone(), adv)?;
                let (loss, g_logp) = grpo_loss(&group, clip);
                l_rl += loss / bsz;
                for (m, d) in p.d_out.iter_mut().enumerate() {
                    let g_mean = policy_logprob_grad_mean(&p.sampled[m], &p.preds[m], cfg.sigma)?;
                    for (x, g) in d.iter_mut().zip(g_mean) {
                        *x += cfg.lambda_rl * g_logp[m] * g * scale / bsz;
                    }
                }
            }
        }

        for p in &pending {
            self.net.backward(&p.ctx, &p.cache, &p.d_out)?;
        }
        let grad_norm = self.net.store.grad_norm();
        if !(l_im.is_finite() && l_rl.is_finite() && grad_norm.is_finite()) {
            let dump = NanDump {
                step,
                scenes: batch.iter().map(|&i| data[i].scene.id.as_str()).collect(),
                noise_steps,
                predictions: pending.iter().map(|p| p.preds.iter().map(Trajectory::flatten).collect()).collect(),
                l_match: l_im,
                l_rl,
                grad_norm,
            };
            if let Some(dir) = &self.dump_dir {
                std::fs::write(dir.join(format!("nan_dump_step{step}.json")), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(Error::NonFiniteLoss { step, scenes: dump.scenes.iter().map(|s| s.to_string()).collect() });
        }
        self.adam.step(&mut self.net);
        Ok(StepLog { step: step + 1, l_match: l_im, l_rl, r_div, r_safe, grad_norm, max_adv_sum })
    }

    /// Network weights followed by optimizer state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Array2<f64>)> =
            self.net.store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (p, m) in self.net.store.params().iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m/{}", p.name), m.clone()));
        }
        for (p, v) in self.net.store.params().iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v/{}", p.name), v.clone()));
        }
        Checkpoint {
            dtype: self.cfg.checkpoint_dtype,
            meta: CheckpointMeta {
                config: self.cfg.to_text(),
                config_hash: self.cfg.hash(),
                scene_hash: self.scene_hash.clone(),
                step: self.adam.t,
            },
            tensors,
        }
    }

    /// Restores a trainer. Training settings come from `cfg`; network shape
    /// must agree with the checkpoint's.
    pub fn from_checkpoint(cfg: RunConfig, ck: &Checkpoint) -> Result<Self> {
        let stored = RunConfig::parse_str(&ck.meta.config)?;
        if stored.denoiser() != cfg.denoiser() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint network {:?} does not match config {:?}",
                stored.denoiser(),
                cfg.denoiser()
            )));
        }
        let mut tr = Self::new(cfg)?;
        let n = tr.net.store.params().len();
        if ck.tensors.len() != n && ck.tensors.len() != 3 * n {
            return Err(Error::ConfigMismatch(format!("checkpoint has {} tensors, expected {n} or {}", ck.tensors.len(), 3 * n)));
        }
        tr.net.load_values(&ck.tensors[..n])?;
        if ck.tensors.len() == 3 * n {
            for (i, p) in tr.net.store.params().iter().enumerate() {
                let (mn, m) = &ck.tensors[n + i];
                let (vn, v) = &ck.tensors[2 * n + i];
                if *mn != format!("adam.m/{}", p.name) || *vn != format!("adam.v/{}", p.name) {
                    return Err(Error::Checkpoint(format!("optimizer state for {} is missing", p.name)));
                }
                tr.adam.m[i].assign(m);
                tr.adam.v[i].assign(v);
            }
            tr.adam.t = ck.meta.step;
        }
        tr.scene_hash = ck.meta.scene_hash.clone();
        Ok(tr)
    }
}

/// Network described by a checkpoint, for inference.
pub fn load_network(ck: &Checkpoint) -> Result<(RunConfig, Denoiser)> {
    let cfg = RunConfig::parse_str(&ck.meta.config)?;
    let mut net = Denoiser::new(cfg.denoiser(), cfg.seed)?;
    let n = net.store.params().len();
    if ck.tensors.len() < n {
        return Err(Error::ConfigMismatch(format!("checkpoint has {} tensors, network needs {n}", ck.tensors.len())));
    }
    net.load_values(&ck.tensors[..n])?;
    Ok((cfg, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LossKind;
    use crate::scene::generate_corpus;

    fn tiny_cfg(loss: LossKind) -> RunConfig {
        RunConfig { scenes: 12, d: 16, epochs: 2, batch_size: 4, loss, ..RunConfig::default() }
    }

    fn data(cfg: &RunConfig, tr: &Trainer) -> Vec<TrainScene> {
        let scenes = generate_corpus(cfg.scenes, cfg.seed, &cfg.templates, cfg.modes, &cfg.scene_config()).unwrap();
        prepare(&scenes, &tr.net, cfg.k_ref).unwrap()
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let cfg = tiny_cfg(LossKind::Match);
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.net.store.params()[0].value.clone();
        tr.net.store.params_mut()[0].grad.fill(1.0);
        tr.adam.step(&mut tr.net);
        let after = &tr.net.store.params()[0].value;
        for (a, b) in after.iter().zip(&before) {
            assert!((b - a - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let tr = Trainer::new(tiny_cfg(LossKind::Match)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| tr.batch_for(10, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(tr.batch_for(10, 2).len(), 2);
    }

    #[test]
    fn every_objective_trains_with_finite_logs() {
        for loss in LossKind::ALL {
            let cfg = tiny_cfg(loss);
            let mut tr = Trainer::new(cfg.clone()).unwrap();
            let d = data(&cfg, &tr);
            let mut logs = Vec::new();
            tr.run(&d, None, |l| {
                logs.push(l.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(logs.len(), 6);
            for l in &logs {
                assert!(l.l_match.is_finite() && l.grad_norm.is_finite() && l.grad_norm > 0.0, "{loss:?} {l:?}");
                assert!(l.max_adv_sum < 1e-9);
                if !loss.uses_rl() {
                    assert_eq!(l.l_rl, 0.0);
                }
            }
        }
    }

    #[test]
    fn checkpoint_restores_the_exact_state() {
        let cfg = tiny_cfg(LossKind::MatchGrpo);
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let d = data(&cfg, &tr);
        tr.run(&d, Some(2), |_| Ok(())).unwrap();
        let back = Trainer::from_checkpoint(cfg, &tr.to_checkpoint()).unwrap();
        assert_eq!(back.adam.t, 2);
        assert_eq!(back.adam, tr.adam);
        for (a, b) in back.net.store.params().iter().zip(tr.net.store.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn checkpoint_with_another_shape_is_rejected() {
        let tr = Trainer::new(tiny_cfg(LossKind::Match)).unwrap();
        let other = RunConfig { d: 32, ..tiny_cfg(LossKind::Match) };
        assert!(matches!(Trainer::from_checkpoint(other, &tr.to_checkpoint()), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn missing_references_are_reported() {
        let cfg = RunConfig { k_ref: 2, ..tiny_cfg(LossKind::Match) };
        let tr = Trainer::new(cfg.clone()).unwrap();
        let scenes = generate_corpus(6, 0, &cfg.templates, 6, &cfg.scene_config()).unwrap();
        assert!(prepare(&scenes, &tr.net, 4).is_err());
        assert_eq!(prepare(&scenes, &tr.net, 0).unwrap()[0].refs, vec![scenes[0].gt.clone()]);
    }
}
