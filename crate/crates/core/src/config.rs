//! Run configuration: a flat `key = value` text format with typed parsing,
//! validation and a stable content hash.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::scene::{Bounds, SceneConfig, Template};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DIVER_SEED";

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Every mode regresses onto the expert trajectory.
    L1,
    L1Ppo,
    /// Hungarian-matched imitation of the reference set.
    Match,
    MatchPpo,
    MatchGrpo,
}

impl LossKind {
    /// Ablation row order.
    pub const ALL: [LossKind; 5] = [LossKind::L1, LossKind::L1Ppo, LossKind::Match, LossKind::MatchPpo, LossKind::MatchGrpo];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L1Ppo => "l1_ppo",
            LossKind::Match => "match",
            LossKind::MatchPpo => "match_ppo",
            LossKind::MatchGrpo => "match_grpo",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            LossKind::L1 => "L1",
            LossKind::L1Ppo => "L1+L_RL(PPO)",
            LossKind::Match => "L_match",
            LossKind::MatchPpo => "L_match+L_RL(PPO)",
            LossKind::MatchGrpo => "L_match+L_RL(GRPO)",
        }
    }

    pub fn uses_matching(self) -> bool {
        matches!(self, LossKind::Match | LossKind::MatchPpo | LossKind::MatchGrpo)
    }

    pub fn uses_rl(self) -> bool {
        !matches!(self, LossKind::L1 | LossKind::Match)
    }

    /// Group-centred advantages; the PPO variants use a batch baseline.
    pub fn group_relative(self) -> bool {
        self == LossKind::MatchGrpo
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}' (expected one of l1, l1_ppo, match, match_ppo, match_grpo)")))
    }
}

/// Storage precision of checkpoint tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::Config(format!("unknown dtype '{s}' (expected f32 or f64)"))),
        }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub templates: Vec<Template>,
    pub modes: usize,
    pub horizon: usize,
    pub dt: f64,
    pub k_ref: usize,
    pub d: usize,
    pub heads: usize,
    pub num_steps: usize,
    pub truncation: usize,
    pub schedule: ScheduleKind,
    pub scale: f64,
    pub loss: LossKind,
    pub lambda_match: f64,
    pub lambda_rl: f64,
    pub lambda_safe: f64,
    pub d_thresh: f64,
    pub sigma: f64,
    /// Ratio clipping bound; zero disables clipping.
    pub clip_eps: f64,
    pub adv_std: bool,
    /// Score each sampled mode relative to its own unperturbed mean.
    pub mode_baseline: bool,
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cell_size: f64,
    pub checkpoint_dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 200,
            templates: Template::ALL.to_vec(),
            modes: 6,
            horizon: 6,
            dt: 0.5,
            k_ref: 6,
            d: 64,
            heads: 4,
            num_steps: 50,
            truncation: 10,
            schedule: ScheduleKind::Linear,
            scale: 30.0,
            loss: LossKind::MatchGrpo,
            lambda_match: 1.0,
            lambda_rl: 0.5,
            lambda_safe: 1.0,
            d_thresh: 0.5,
            sigma: 0.3,
            clip_eps: 0.2,
            adv_std: true,
            mode_baseline: true,
            lr: 1e-3,
            grad_clip: 5.0,
            batch_size: 8,
            epochs: 30,
            cell_size: 0.5,
            checkpoint_dtype: Dtype::F64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Parses a comma-separated template list.
pub fn parse_templates(value: &str) -> Result<Vec<Template>> {
    let list = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Template::from_str)
        .collect::<Result<Vec<_>>>()?;
    if list.is_empty() {
        return Err(Error::Config("templates must name at least one template".into()));
    }
    Ok(list)
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in canonical order.
    pub const KEYS: [&'static str; 29] = [
        "seed",
        "scenes",
        "templates",
        "modes",
        "horizon",
        "dt",
        "k_ref",
        "d",
        "heads",
        "num_steps",
        "truncation",
        "schedule",
        "scale",
        "loss",
        "lambda_match",
        "lambda_rl",
        "lambda_safe",
        "d_thresh",
        "sigma",
        "clip_eps",
        "adv_std",
        "mode_baseline",
        "lr",
        "grad_clip",
        "batch_size",
        "epochs",
        "cell_size",
        "checkpoint_dtype",
        "workers",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "scenes" => self.scenes = parse(key, value)?,
            "templates" => self.templates = parse_templates(value)?,
            "modes" => self.modes = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "k_ref" => self.k_ref = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "num_steps" => self.num_steps = parse(key, value)?,
            "truncation" => self.truncation = parse(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "scale" => self.scale = parse(key, value)?,
            "loss" => self.loss = value.parse()?,
            "lambda_match" => self.lambda_match = parse(key, value)?,
            "lambda_rl" => self.lambda_rl = parse(key, value)?,
            "lambda_safe" => self.lambda_safe = parse(key, value)?,
            "d_thresh" => self.d_thresh = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "clip_eps" => self.clip_eps = parse(key, value)?,
            "adv_std" => self.adv_std = parse_bool(key, value)?,
            "mode_baseline" => self.mode_baseline = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "cell_size" => self.cell_size = parse(key, value)?,
            "checkpoint_dtype" => self.checkpoint_dtype = value.parse()?,
            "workers" => {
                let w: usize = parse(key, value)?;
                if w != 1 {
                    return Err(Error::Config("only single-worker execution is supported (workers = 1)".into()));
                }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored; unknown or repeated keys fail.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| perr("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(perr(format!("duplicate key '{key}'")));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|e| perr(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the [`SEED_ENV`] override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse_str(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Applies the [`SEED_ENV`] override if the variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.modes < 2 {
            return bad("modes must be at least 2");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if self.truncation == 0 || self.truncation > self.num_steps {
            return bad("truncation must be in 1..=num_steps");
        }
        if !(self.d_thresh > 0.0) {
            return bad("d_thresh must be > 0");
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidSigma(self.sigma));
        }
        if !(self.clip_eps >= 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in [0, 1)");
        }
        if [self.lambda_match, self.lambda_rl, self.lambda_safe].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss and reward weights must be >= 0");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr and grad_clip must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.cell_size > 0.0) {
            return bad("cell_size must be > 0");
        }
        if self.k_ref > 15 {
            return bad("k_ref must be at most 15");
        }
        self.denoiser().validate()?;
        crate::diffusion::make_schedule(self.num_steps, self.schedule)?;
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig { d: self.d, heads: self.heads, horizon: self.horizon, modes: self.modes, scale: self.scale }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            horizon: self.horizon,
            dt: self.dt,
            k_ref: self.k_ref.max(1),
            cell_size: self.cell_size,
            bounds: Bounds::default(),
            d_thresh: self.d_thresh,
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "scenes" => self.scenes.to_string(),
            "templates" => self.templates.iter().map(|t| t.name()).collect::<Vec<_>>().join(","),
            "modes" => self.modes.to_string(),
            "horizon" => self.horizon.to_string(),
            "dt" => format!("{:?}", self.dt),
            "k_ref" => self.k_ref.to_string(),
            "d" => self.d.to_string(),
            "heads" => self.heads.to_string(),
            "num_steps" => self.num_steps.to_string(),
            "truncation" => self.truncation.to_string(),
            "schedule" => self.schedule.to_string(),
            "scale" => format!("{:?}", self.scale),
            "loss" => self.loss.name().to_string(),
            "lambda_match" => format!("{:?}", self.lambda_match),
            "lambda_rl" => format!("{:?}", self.lambda_rl),
            "lambda_safe" => format!("{:?}", self.lambda_safe),
            "d_thresh" => format!("{:?}", self.d_thresh),
            "sigma" => format!("{:?}", self.sigma),
            "clip_eps" => format!("{:?}", self.clip_eps),
            "adv_std" => self.adv_std.to_string(),
            "mode_baseline" => self.mode_baseline.to_string(),
            "lr" => format!("{:?}", self.lr),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "cell_size" => format!("{:?}", self.cell_size),
            "checkpoint_dtype" => match self.checkpoint_dtype {
                Dtype::F32 => "f32".into(),
                Dtype::F64 => "f64".into(),
            },
            "workers" => "1".into(),
            _ => unreachable!("key list is fixed"),
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Hash over the keys that determine the scene corpus.
    pub fn scene_hash(&self) -> String {
        let mut s = String::new();
        for key in ["seed", "scenes", "templates", "horizon", "dt", "k_ref", "d_thresh", "cell_size", "modes"] {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        sha256_hex(s.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
