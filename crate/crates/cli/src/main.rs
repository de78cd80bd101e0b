//! Command-line driver for the keyframe-selection trainer.
//!
//! Subcommands: `gen-env` materializes synthetic episode files, `train`
//! runs the policy-gradient loop into a run directory (with a manifest and
//! resumable checkpoints), `eval` scores a checkpoint against the uniform /
//! visual-similarity / policy selection strategies, `infer` runs one
//! instance end to end, and `diag` flattens an episode log into CSVs for
//! plotting.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems, 1 for
//! runtime failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use framepick_core::env::{generate_episode, load_episodes, write_episodes, Episode, SyntheticSpec};
use framepick_core::checkpoint::{load_checkpoint, Checkpoint};
use framepick_core::trainer::{
    cib_estimates, config_hash, evaluate, heldout_instances, infer, load_episode_logs, train,
    Baseline, TrainConfig,
};
use framepick_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "framepick", version, about = "Train and inspect causal keyframe-selection policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode file (line-delimited JSON).
    GenEnv(GenEnvArgs),
    /// Train a selection policy into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out instances.
    Eval(EvalArgs),
    /// Select frames and answer for a single instance.
    Infer(InferArgs),
    /// Flatten an episode log into CSV files for plotting.
    Diag(DiagArgs),
}

#[derive(Args)]
struct GenEnvArgs {
    /// Environment spec TOML; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Episodes to generate (seeds 0..count).
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Output episode file.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config TOML; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint with optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the oracle backend (synthetic | http).
    #[arg(long)]
    oracle: Option<String>,
    /// Override the cycle-consistency reward weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Override the counterfactual reward weight.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Override the rollouts per episode (G).
    #[arg(long)]
    groups: Option<usize>,
    /// Override the frames selected per rollout (K).
    #[arg(long)]
    k: Option<usize>,
    /// Override the candidate pool size (M).
    #[arg(long)]
    m: Option<usize>,
    /// Override the Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Training config TOML describing the environment and oracle.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Selection strategy: uniform | visual | policy.
    #[arg(long, default_value = "policy")]
    baseline: String,
    /// Override the number of held-out instances.
    #[arg(long)]
    instances: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Training config TOML describing the environment and oracle.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint holding the policy parameters.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode file to read the instance from (default: held-out
    /// instances of the configured synthetic environment).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Which instance to run.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args)]
struct DiagArgs {
    /// Episode log (episodes.jsonl) from a training run.
    #[arg(long)]
    log: PathBuf,
    /// Directory for the CSV outputs (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
}

/// What a run directory contains and how it was produced. Written as
/// `run.json` before the first episode and finalized when training ends.
#[derive(Serialize)]
struct RunManifest {
    tool_version: String,
    config_hash: String,
    master_seed: u64,
    started_at: String,
    finished_at: Option<String>,
    status: String,
    episodes_total: Option<u64>,
    episodes_failed: Option<u64>,
    log_path: String,
    checkpoint_dir: String,
    final_checkpoint: Option<String>,
    config: TrainConfig,
}

fn now_utc() -> String {
    chrono::Utc::now()
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .downcast_ref::<CoreError>()
                .is_some_and(CoreError::is_validation);
            if validation {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenEnv(args) => gen_env(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Diag(args) => run_diag(args),
    }
}

/// Reads a TOML file into `T`, classifying unreadable files and malformed
/// contents as input/config errors (exit code 2).
fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CoreError::Input(format!("cannot read {}: {e}", path.display())))?;
    let value = toml::from_str(&text)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
    Ok(value)
}

fn load_train_config(path: Option<&Path>, args: Option<&TrainArgs>) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(args) = args {
        apply_overrides(&mut cfg, args)?;
    }
    if let Some(http) = cfg.http_oracle.as_mut() {
        http.resolve_token_from_env();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> anyhow::Result<()> {
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(oracle) = &args.oracle {
        cfg.oracle = match oracle.to_ascii_lowercase().as_str() {
            "synthetic" => framepick_core::trainer::OracleKind::Synthetic,
            "http" => framepick_core::trainer::OracleKind::Http,
            other => {
                return Err(CoreError::Input(format!(
                    "unknown oracle {other:?} (expected synthetic or http)"
                ))
                .into())
            }
        };
    }
    if let Some(l1) = args.lambda1 {
        cfg.lambda1 = l1;
    }
    if let Some(l2) = args.lambda2 {
        cfg.lambda2 = l2;
    }
    if let Some(g) = args.groups {
        cfg.group_size = g;
    }
    if let Some(k) = args.k {
        cfg.select_k = k;
    }
    if let Some(m) = args.m {
        cfg.pool_size = m;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(CoreError::Input(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn load_params(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn gen_env(args: GenEnvArgs) -> anyhow::Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(p) => read_toml(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    spec.validate()?;
    if args.count == 0 {
        return Err(CoreError::Input("--count must be >= 1".into()).into());
    }
    let episodes: Vec<Episode> = (0..args.count as u64)
        .map(|s| generate_episode(&spec, s))
        .collect::<Result<_, _>>()?;
    let regens: u32 = episodes.iter().map(|e| e.regenerations).sum();
    write_episodes(&args.out, &episodes)?;
    println!(
        "wrote {} episodes to {} ({} layouts regenerated)",
        episodes.len(),
        args.out.display(),
        regens
    );
    Ok(())
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    let body = serde_json::to_string_pretty(manifest)?;
    fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_train_config(args.config.as_deref(), Some(&args))?;
    if let Some(resume) = &args.resume {
        require_file(resume, "resume checkpoint")?;
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating run directory {}", args.out.display()))?;

    let hash = config_hash(&cfg)?;
    let manifest_path = args.out.join("run.json");
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash.clone(),
        master_seed: cfg.master_seed,
        started_at: now_utc(),
        finished_at: None,
        status: "running".into(),
        episodes_total: None,
        episodes_failed: None,
        log_path: "episodes.jsonl".into(),
        checkpoint_dir: "checkpoints".into(),
        final_checkpoint: None,
        config: cfg.clone(),
    };
    write_manifest(&manifest_path, &manifest)?;

    let result = train(&cfg, &args.out, args.resume.as_deref());
    manifest.finished_at = Some(now_utc());
    match &result {
        Ok(report) => {
            manifest.status = "complete".into();
            manifest.episodes_total = Some(report.episodes);
            manifest.episodes_failed = Some(report.failed);
            manifest.final_checkpoint = Some(
                report
                    .final_checkpoint
                    .strip_prefix(&args.out)
                    .unwrap_or(&report.final_checkpoint)
                    .display()
                    .to_string(),
            );
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
        }
    }
    write_manifest(&manifest_path, &manifest)?;
    let report = result?;
    println!(
        "trained {} episodes ({} failed); final checkpoint {}",
        report.episodes,
        report.failed,
        report.final_checkpoint.display()
    );
    println!("run manifest: {}", manifest_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_train_config(args.config.as_deref(), None)?;
    let baseline: Baseline = args.baseline.parse::<Baseline>()?;
    let checkpoint = load_params(&args.checkpoint)?;
    let instances = heldout_instances(&cfg, args.instances)?;
    let report = evaluate(&checkpoint.params, &cfg, baseline, &instances)?;
    let body = serde_json::to_string_pretty(&report)?;
    println!("{body}");
    if let Some(out) = &args.out {
        fs::write(out, body + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_infer(args: InferArgs) -> anyhow::Result<()> {
    let cfg = load_train_config(args.config.as_deref(), None)?;
    let checkpoint = load_params(&args.checkpoint)?;
    let instances = match &args.dataset {
        Some(path) => {
            require_file(path, "dataset")?;
            load_episodes(path)?
        }
        None => heldout_instances(&cfg, None)?,
    };
    let instance = instances.get(args.index).ok_or_else(|| {
        CoreError::Input(format!(
            "--index {} out of range: {} instances available",
            args.index,
            instances.len()
        ))
    })?;
    let result = infer(&checkpoint.params, &cfg, instance)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

/// Writes `metrics.csv` (one row per successful episode) and `sigma.csv`
/// (one row per pool frame per episode) from an episode log.
fn run_diag(args: DiagArgs) -> anyhow::Result<()> {
    require_file(&args.log, "episode log")?;
    let (logs, corrupt) = load_episode_logs(&args.log)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let metrics_path = args.out_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    metrics.write_record(["episode", "j1_hat", "j2_hat", "mean_reward", "grad_norm"])?;
    let mut failed = 0usize;
    for log in &logs {
        match cib_estimates(log) {
            Some((j1, j2)) => {
                metrics.write_record([
                    log.episode.to_string(),
                    format!("{j1}"),
                    format!("{j2}"),
                    format!("{}", log.mean_reward),
                    format!("{}", log.grad_norm),
                ])?;
            }
            None => failed += 1,
        }
    }
    metrics.flush()?;

    let sigma_path = args.out_dir.join("sigma.csv");
    let mut sigma = csv::Writer::from_path(&sigma_path)
        .with_context(|| format!("writing {}", sigma_path.display()))?;
    sigma.write_record(["episode", "frame_index", "sigma"])?;
    for log in &logs {
        for (frame, s) in log.pool.iter().zip(&log.sigma) {
            sigma.write_record([
                log.episode.to_string(),
                frame.to_string(),
                format!("{s}"),
            ])?;
        }
    }
    sigma.flush()?;

    println!(
        "{} episodes ({} without rollouts, {} corrupt lines) -> {} and {}",
        logs.len(),
        failed,
        corrupt,
        metrics_path.display(),
        sigma_path.display()
    );
    Ok(())
}
