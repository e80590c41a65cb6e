use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diver_cli::{
    cmd_ablate, cmd_eval, cmd_plot, cmd_sample, cmd_scene_gen, cmd_train, resolve_config, CliError, CliResult, EvalArgs,
    SampleArgs, TrainArgs,
};
use diver_core::eval::AblationAxis;
use diver_core::scene::DEFAULT_D_THRESH;

/// Multi-mode trajectory planner trained with reinforced diffusion.
#[derive(Parser)]
#[command(name = "diver", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: a flat `key = value` file plus command-line overrides.
/// `DIVER_SEED` in the environment replaces the seed.
#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus and its manifest.
    SceneGen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a denoiser on a corpus; writes a checkpoint and a CSV step log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory written by scene-gen.
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint to write.
        #[arg(long, short)]
        out: PathBuf,
        /// Step log; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint (weights, optimizer state, step).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have been taken in total.
        #[arg(long)]
        stop_after_steps: Option<u64>,
    },
    /// Sample every scene and write trajectories, per-timestamp metrics and a summary.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Evaluate even if the corpus was generated under a different scene config.
        #[arg(long)]
        force: bool,
        /// Override a sampling-time key (seed, truncation, num_steps, lambda_safe, d_thresh).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sample mode sets for every scene into a JSON-Lines file.
    Sample {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Number of modes; must match the trained network.
        #[arg(long)]
        modes: Option<usize>,
        /// Denoising steps (defaults to the trained truncation).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one axis of variants and write a comparison CSV.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// loss, k-ref or lambda-safe.
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a scene and its sampled modes as SVG.
    Plot {
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        /// Trajectory JSON-Lines file; the scene alone is drawn without it.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Clearance drawn as the safety contour, in meters.
        #[arg(long, default_value_t = DEFAULT_D_THRESH)]
        d_thresh: f64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let config = |c: &ConfigArgs| resolve_config(c.config.as_deref(), &c.overrides);
    match cli.command {
        Command::SceneGen { config: c, out } => {
            let m = cmd_scene_gen(&config(&c)?, &out)?;
            println!("wrote {} scenes to {} (scene hash {})", m.count, out.display(), m.scene_hash);
        }
        Command::Train { config: c, scenes, out, log, resume, stop_after_steps } => {
            let step = cmd_train(&config(&c)?, &TrainArgs { scenes, out: out.clone(), log, resume, stop_after_steps })?;
            println!("trained to step {step}; checkpoint {}", out.display());
        }
        Command::Eval { weights, scenes, out, force, overrides } => {
            let s = cmd_eval(&EvalArgs { weights, scenes, out, force, overrides })?;
            println!("{}", serde_json::to_string(&s.div)?);
        }
        Command::Sample { weights, scenes, out, modes, steps, seed, force } => {
            let sets = cmd_sample(&SampleArgs { weights, scenes, out: out.clone(), modes, steps, seed, force })?;
            println!("sampled {} scenes into {}", sets.len(), out.display());
        }
        Command::Ablate { config: c, axis, out } => {
            cmd_ablate(&config(&c)?, axis, &out, |row| {
                match row.div[3] {
                    Some(avg) => eprintln!("{}: Div Avg {avg:.4}", row.label),
                    None => eprintln!("{}: {}", row.label, row.status),
                }
            })?;
            println!("wrote {}", out.display());
        }
        Command::Plot { scene, traj, out, d_thresh } => {
            if !(d_thresh.is_finite() && d_thresh >= 0.0) {
                return Err(CliError::Usage(format!("--d-thresh must be a finite non-negative number, got {d_thresh}")));
            }
            cmd_plot(&scene, traj.as_deref(), &out, d_thresh)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `diver --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
