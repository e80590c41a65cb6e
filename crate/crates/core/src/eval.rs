//! Corpus evaluation and the ablation sweeps built on it.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{LossKind, RunConfig};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SceneEval};
use crate::rewards::total_reward;
use crate::rng::{rng_for, stream};
use crate::scene::Scene;
use crate::train::{prepare, StepLog, Trainer};
use crate::trajectory::TrajectorySet;

/// Sampled mode sets, the selected mode per scene, and the metric summary.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub sets: Vec<TrajectorySet>,
    pub chosen: Vec<usize>,
    pub report: MetricReport,
}

/// Samples every scene with `cfg.truncation` denoising steps and scores the
/// result. The selected mode is the one with the highest total reward.
pub fn evaluate(net: &Denoiser, cfg: &RunConfig, scenes: &[Scene]) -> Result<Evaluation> {
    let sampler = SamplerConfig::new(cfg.num_steps, cfg.schedule, cfg.scale)?;
    let mut sets = Vec::with_capacity(scenes.len());
    let mut chosen = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, stream::SAMPLE, i as u64);
        let set = sample(net, &sampler, s, cfg.modes, cfg.truncation, &mut rng)?;
        chosen.push(total_reward(&set, &s.safety, cfg.lambda_safe, cfg.d_thresh)?.best_mode());
        sets.push(set);
    }
    let evals: Vec<SceneEval<'_>> = scenes
        .iter()
        .zip(&sets)
        .zip(&chosen)
        .map(|((s, set), &c)| SceneEval { set, chosen: c, gt: &s.gt, field: &s.safety })
        .collect();
    let report = MetricReport::compute(&evals, cfg.d_thresh)?;
    Ok(Evaluation { sets, chosen, report })
}

/// Trains a fresh network on `train` with `k_ref` references.
pub fn train_variant(cfg: &RunConfig, train: &[Scene], k_ref: usize, on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<Trainer> {
    let mut tr = Trainer::new(cfg.clone())?;
    let data = prepare(train, &tr.net, k_ref)?;
    tr.run(&data, None, on_step)?;
    Ok(tr)
}

/// Ablation dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Loss,
    KRef,
    LambdaSafe,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "loss" => Ok(Self::Loss),
            "kref" => Ok(Self::KRef),
            "lambdasafe" => Ok(Self::LambdaSafe),
            _ => Err(Error::Config(format!("unknown ablation axis '{s}' (expected loss, k-ref or lambda-safe)"))),
        }
    }
}

/// K_ref values of the reference-count sweep.
pub const K_REF_SWEEP: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
/// lambda_safe values of the safety-weight sweep.
pub const LAMBDA_SAFE_SWEEP: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// One trained variant and its evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    /// Diversity at 1 s, 2 s, 3 s and their mean.
    pub div: [Option<f64>; 4],
    pub collision_avg: Option<f64>,
    pub avg_l2: Option<f64>,
    /// `None` when the variant diverged; see `status`.
    pub report: Option<MetricReport>,
    /// "ok", or why the variant produced no metrics.
    pub status: String,
}

/// Variants of `axis` as (label, config, k_ref).
pub fn ablation_variants(cfg: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig, usize)> {
    match axis {
        AblationAxis::Loss => LossKind::ALL
            .iter()
            .map(|&loss| (loss.label().to_string(), RunConfig { loss, ..cfg.clone() }, cfg.k_ref))
            .collect(),
        AblationAxis::KRef => K_REF_SWEEP
            .iter()
            .map(|&k| (format!("K_ref={k}"), RunConfig { loss: LossKind::Match, k_ref: k, ..cfg.clone() }, k))
            .collect(),
        AblationAxis::LambdaSafe => LAMBDA_SAFE_SWEEP
            .iter()
            .map(|&l| (format!("lambda_safe={l}"), RunConfig { lambda_safe: l, ..cfg.clone() }, cfg.k_ref))
            .collect(),
    }
}

/// True for failures that mean the trained network itself is unusable
/// (non-finite loss or outputs outside the scene), as opposed to bad input.
fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLoss { .. } | Error::InvalidTrajectory(_))
}

/// Trains and evaluates one variant. Diversity is measured on `eval`. A
/// variant whose training or sampling diverges yields a row without metrics.
pub fn run_variant(label: &str, cfg: &RunConfig, k_ref: usize, train: &[Scene], eval: &[Scene]) -> Result<AblationRow> {
    let outcome = train_variant(cfg, train, k_ref, |_| Ok(())).and_then(|tr| evaluate(&tr.net, cfg, eval));
    match outcome {
        Ok(ev) => {
            let report = ev.report;
            Ok(AblationRow {
                label: label.to_string(),
                div: report.div_table_row(cfg.dt),
                collision_avg: Some(report.collision_avg),
                avg_l2: Some(report.avg_l2),
                report: Some(report),
                status: "ok".into(),
            })
        }
        Err(e) if is_divergence(&e) => Ok(AblationRow {
            label: label.to_string(),
            div: [None; 4],
            collision_avg: None,
            avg_l2: None,
            report: None,
            status: format!("diverged: {e}"),
        }),
        Err(e) => Err(e),
    }
}

/// Table with one row per variant and columns Div@1s, Div@2s, Div@3s, Avg.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,div_1s,div_2s,div_3s,div_avg,collision_avg,avg_l2,status\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        let status = if r.status.contains([',', '"', '\n']) { format!("\"{}\"", r.status.replace('"', "\"\"")) } else { r.status.clone() };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{status}",
            r.label,
            cell(r.div[0]),
            cell(r.div[1]),
            cell(r.div[2]),
            cell(r.div[3]),
            cell(r.collision_avg),
            cell(r.avg_l2),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_corpus;

    fn small() -> (RunConfig, Vec<Scene>) {
        let cfg = RunConfig { scenes: 8, d: 16, epochs: 1, batch_size: 4, ..RunConfig::default() };
        let scenes = generate_corpus(cfg.scenes, cfg.seed, &cfg.templates, cfg.modes, &cfg.scene_config()).unwrap();
        (cfg, scenes)
    }

    #[test]
    fn untrained_network_evaluates_to_finite_metrics() {
        let (cfg, scenes) = small();
        let net = Denoiser::new(cfg.denoiser(), 0).unwrap();
        let a = evaluate(&net, &cfg, &scenes).unwrap();
        let b = evaluate(&net, &cfg, &scenes).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.div_at.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(a.report.avg_l2.is_finite() && a.report.collapse_trace.is_finite());
        assert_eq!(a.sets.len(), scenes.len());
    }

    #[test]
    fn variants_follow_the_table_order() {
        let cfg = RunConfig::default();
        let loss: Vec<String> = ablation_variants(&cfg, AblationAxis::Loss).into_iter().map(|v| v.0).collect();
        assert_eq!(loss, ["L1", "L1+L_RL(PPO)", "L_match", "L_match+L_RL(PPO)", "L_match+L_RL(GRPO)"]);
        let k = ablation_variants(&cfg, AblationAxis::KRef);
        assert_eq!(k.len(), 9);
        assert_eq!((k[0].2, k[0].1.loss), (0, LossKind::Match));
        assert_eq!("k-ref".parse::<AblationAxis>().unwrap(), AblationAxis::KRef);
        assert!("speed".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn ablation_rows_render_as_csv() {
        let (cfg, scenes) = small();
        let row = run_variant("L_match", &RunConfig { loss: LossKind::Match, ..cfg.clone() }, 6, &scenes, &scenes).unwrap();
        let csv = ablation_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("L_match,"));
        assert_eq!(lines[1].split(',').count(), 8);
        assert!(lines[1].ends_with(",ok"));
    }

    #[test]
    fn a_runaway_variant_becomes_an_empty_row() {
        let (cfg, scenes) = small();
        let wild = RunConfig { loss: LossKind::L1Ppo, lambda_rl: 50.0, lr: 0.05, epochs: 40, ..cfg };
        let row = run_variant("L1+L_RL(PPO)", &wild, 6, &scenes, &scenes).unwrap();
        assert!(row.status.starts_with("diverged"), "{}", row.status);
        assert!(row.report.is_none() && row.div.iter().all(Option::is_none));
        let csv = ablation_csv(&[row]);
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("L1+L_RL(PPO),,,,,,,"), "{line}");
    }
}
