//! Command implementations behind the `diver` binary.
//!
//! Each `cmd_*` function does the work of one subcommand and reports failures
//! as [`CliError`], which maps onto the process exit code.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use diver_core::checkpoint::Checkpoint;
use diver_core::config::{sha256_hex, RunConfig};
use diver_core::diffusion::{sample, SamplerConfig};
use diver_core::error::Error;
use diver_core::eval::{ablation_csv, ablation_variants, evaluate, run_variant, AblationAxis, AblationRow, K_REF_SWEEP};
use diver_core::plot::render_svg;
use diver_core::rng::{rng_for, stream};
use diver_core::scene::{generate_corpus, Scene};
use diver_core::train::{load_network, prepare, Trainer, LOG_HEADER};
use diver_core::trajectory::{read_jsonl, write_jsonl, TrajectorySet};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Everything that fails while doing the work. Exit code 1.
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Run(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Run(Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reads the config file (or the defaults), then applies `key=value`
/// overrides and the seed environment override. Any problem is a usage error.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let usage = |e: Error| CliError::Usage(e.to_string());
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse_str(&text).map_err(usage)?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    cfg.apply_env().map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> CliResult<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{kv}' is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

/// One scene file listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub id: String,
    pub template: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub scene_hash: String,
    pub seed: u64,
    pub count: usize,
    pub scenes: Vec<ManifestEntry>,
}

/// Writes one JSON file per scene and the manifest into `dir`.
pub fn write_corpus(dir: &Path, cfg: &RunConfig, scenes: &[Scene]) -> CliResult<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:05}.json");
        let text = s.to_json()?;
        fs::write(dir.join(&file), &text)?;
        entries.push(ManifestEntry { file, id: s.id.clone(), template: s.template.to_string(), sha256: sha256_hex(text.as_bytes()) });
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        scene_hash: cfg.scene_hash(),
        seed: cfg.seed,
        count: scenes.len(),
        scenes: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads the scenes listed in `dir`'s manifest, checking each file's hash.
pub fn read_corpus(dir: &Path) -> CliResult<(Manifest, Vec<Scene>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::InvalidCorpus(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let text = fs::read_to_string(dir.join(&entry.file))?;
        if sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(Error::InvalidCorpus(format!("{} does not match its manifest hash", entry.file)).into());
        }
        scenes.push(Scene::from_json(&text)?);
    }
    Ok((manifest, scenes))
}

pub fn cmd_scene_gen(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    let scenes = generate_corpus(cfg.scenes, cfg.seed, &cfg.templates, cfg.modes, &cfg.scene_config())?;
    write_corpus(out, cfg, &scenes)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub scenes: PathBuf,
    pub out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.csv` extension.
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop once this many optimizer steps have been taken in total.
    pub stop_after_steps: Option<u64>,
}

/// Trains on a corpus and writes the checkpoint and step log. Returns the
/// final global step.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<u64> {
    let (manifest, scenes) = read_corpus(&args.scenes)?;
    let mut tr = match &args.resume {
        Some(p) => Trainer::from_checkpoint(cfg.clone(), &Checkpoint::load(p)?)?,
        None => {
            let mut tr = Trainer::new(cfg.clone())?;
            tr.scene_hash = manifest.scene_hash.clone();
            tr
        }
    };
    tr.dump_dir = Some(args.out.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    let data = prepare(&scenes, &tr.net, cfg.k_ref)?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let append = args.resume.is_some() && log_path.exists();
    let file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&log_path)?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{LOG_HEADER}")?;
    }
    tr.run(&data, args.stop_after_steps, |s| {
        writeln!(log, "{}", s.csv_row())?;
        Ok(())
    })?;
    log.flush()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    tr.to_checkpoint().save(&args.out)?;
    Ok(tr.step())
}

/// Loads a checkpoint and the corpus, refusing a corpus generated under a
/// different scene configuration unless `force` is set.
fn load_for_inference(weights: &Path, scenes_dir: &Path, force: bool) -> CliResult<(Checkpoint, RunConfig, diver_core::denoiser::Denoiser, Vec<Scene>)> {
    let ck = Checkpoint::load(weights)?;
    let (cfg, net) = load_network(&ck)?;
    let (manifest, scenes) = read_corpus(scenes_dir)?;
    if !force && manifest.scene_hash != ck.meta.scene_hash {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained on scene config {} but the corpus has {}; pass --force to evaluate anyway",
            ck.meta.scene_hash, manifest.scene_hash
        ))
        .into());
    }
    if let Some(s) = scenes.first() {
        if s.anchors.len() != cfg.modes || s.gt.len() != cfg.horizon {
            return Err(Error::ConfigMismatch(format!(
                "corpus has {} anchors of length {}, network expects {} modes of length {}",
                s.anchors.len(),
                s.gt.len(),
                cfg.modes,
                cfg.horizon
            ))
            .into());
        }
    }
    Ok((ck, cfg, net, scenes))
}

/// Sampling-time settings that may differ from the training run.
const INFERENCE_KEYS: [&str; 5] = ["seed", "truncation", "lambda_safe", "d_thresh", "num_steps"];

fn inference_config(mut cfg: RunConfig, overrides: &[String]) -> CliResult<RunConfig> {
    for kv in overrides {
        let key = kv.split_once('=').map_or(kv.as_str(), |(k, _)| k.trim());
        if !INFERENCE_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("'{key}' cannot be overridden at inference (allowed: {})", INFERENCE_KEYS.join(", "))));
        }
    }
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub weights: PathBuf,
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub force: bool,
    /// `key=value` overrides of sampling-time settings.
    pub overrides: Vec<String>,
}

/// Table-style summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub scene_hash: String,
    pub scenes: usize,
    /// Div at 1 s, 2 s, 3 s and their mean.
    pub div: DivColumns,
    pub collision_avg: f64,
    pub avg_l2: f64,
    pub collapse_trace: f64,
    pub collapse_cross_trace: f64,
    pub div_at: Vec<f64>,
    pub collision_at: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivColumns {
    #[serde(rename = "1s")]
    pub s1: Option<f64>,
    #[serde(rename = "2s")]
    pub s2: Option<f64>,
    #[serde(rename = "3s")]
    pub s3: Option<f64>,
    #[serde(rename = "Avg")]
    pub avg: Option<f64>,
}

/// Samples every scene and writes `trajectories.jsonl`, `metrics.csv` and
/// `summary.json` into `args.out`.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalSummary> {
    let (ck, cfg, net, scenes) = load_for_inference(&args.weights, &args.scenes, args.force)?;
    let cfg = inference_config(cfg, &args.overrides)?;
    let ev = evaluate(&net, &cfg, &scenes)?;
    fs::create_dir_all(&args.out)?;
    write_jsonl(BufWriter::new(fs::File::create(args.out.join("trajectories.jsonl"))?), &ev.sets)?;
    let r = &ev.report;
    let mut csv = String::from("t,div,collision\n");
    for (i, (d, c)) in r.div_at.iter().zip(&r.collision_at).enumerate() {
        csv.push_str(&format!("{},{d},{c}\n", (i + 1) as f64 * cfg.dt));
    }
    fs::write(args.out.join("metrics.csv"), csv)?;
    let [s1, s2, s3, avg] = r.div_table_row(cfg.dt);
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        scene_hash: ck.meta.scene_hash.clone(),
        scenes: scenes.len(),
        div: DivColumns { s1, s2, s3, avg },
        collision_avg: r.collision_avg,
        avg_l2: r.avg_l2,
        collapse_trace: r.collapse_trace,
        collapse_cross_trace: r.collapse_cross_trace,
        div_at: r.div_at.clone(),
        collision_at: r.collision_at.clone(),
    };
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct SampleArgs {
    pub weights: PathBuf,
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub modes: Option<usize>,
    /// Denoising steps; defaults to the trained truncation.
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub force: bool,
}

/// Samples mode sets for every scene into a JSON-Lines file.
pub fn cmd_sample(args: &SampleArgs) -> CliResult<Vec<TrajectorySet>> {
    let (_, cfg, net, scenes) = load_for_inference(&args.weights, &args.scenes, args.force)?;
    let modes = args.modes.unwrap_or(cfg.modes);
    if modes != cfg.modes {
        return Err(Error::ConfigMismatch(format!("network was trained for {} modes, {modes} requested", cfg.modes)).into());
    }
    let steps = args.steps.unwrap_or(cfg.truncation);
    if steps > cfg.num_steps {
        return Err(CliError::Usage(format!("--steps {steps} exceeds the schedule length {}", cfg.num_steps)));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let sampler = SamplerConfig::new(cfg.num_steps, cfg.schedule, cfg.scale)?;
    let sets = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| sample(&net, &sampler, s, modes, steps, &mut rng_for(seed, stream::SAMPLE, i as u64)))
        .collect::<diver_core::error::Result<Vec<_>>>()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_jsonl(BufWriter::new(fs::File::create(&args.out)?), &sets)?;
    Ok(sets)
}

/// Trains and evaluates every variant of `axis` and writes the comparison
/// CSV. The corpus is generated from `cfg`; on the reference-count axis it is
/// generated once with the largest count and each variant uses a prefix.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis, out: &Path, mut progress: impl FnMut(&AblationRow)) -> CliResult<Vec<AblationRow>> {
    let corpus_cfg = match axis {
        AblationAxis::KRef => RunConfig { k_ref: K_REF_SWEEP[K_REF_SWEEP.len() - 1], ..cfg.clone() },
        _ => cfg.clone(),
    };
    let scenes = generate_corpus(corpus_cfg.scenes, corpus_cfg.seed, &corpus_cfg.templates, corpus_cfg.modes, &corpus_cfg.scene_config())?;
    let mut rows = Vec::new();
    for (label, vcfg, k) in ablation_variants(cfg, axis) {
        let row = run_variant(&label, &vcfg, k, &scenes, &scenes)?;
        progress(&row);
        rows.push(row);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, ablation_csv(&rows))?;
    Ok(rows)
}

/// Renders one scene and, if given, its sampled modes from a JSON-Lines file.
/// Records for other scenes are ignored; an empty file draws the scene alone.
pub fn cmd_plot(scene_path: &Path, traj: Option<&Path>, out: &Path, d_thresh: f64) -> CliResult<()> {
    let scene = Scene::from_json(&fs::read_to_string(scene_path)?)?;
    let sets = match traj {
        Some(p) => read_jsonl(BufReader::new(fs::File::open(p)?))?,
        None => Vec::new(),
    };
    if !sets.is_empty() && !sets.iter().any(|s| s.scene_id() == scene.id) {
        return Err(Error::InvalidSet(format!("no trajectories for scene {} in the input", scene.id)).into());
    }
    let set = sets.iter().find(|s| s.scene_id() == scene.id);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, render_svg(&scene, set, d_thresh))?;
    Ok(())
}
