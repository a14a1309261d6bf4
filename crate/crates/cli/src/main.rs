mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use fnftg_core::checkpoint;
use fnftg_core::config::{preset, TrainConfig};
use fnftg_core::eval::{evaluate_model, EvalOptions};
use fnftg_core::gradcheck::run_gradcheck;
use fnftg_core::kg::{dataset_stats, load_dataset, Phase, Regime};
use fnftg_core::synth::{write_synthetic, SyntheticTask};
use fnftg_core::trainer::run_training_dir;
use log::warn;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "fnftg", version, about = "Inductive link prediction from entity text and 1-hop subgraphs")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dynamic")]
        regime: Regime,
    },
    /// Train a model, writing logs, a checkpoint and a run manifest to `--out`.
    Train {
        /// TOML configuration; unspecified keys take their defaults.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named configuration (fnf-tg, fnf-t, synthetic-tg, synthetic-t, synthetic-tg-half).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, required_unless_present = "from_manifest")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Re-run exactly the configuration recorded in a previous run manifest.
        #[arg(long, conflicts_with_all = ["config", "preset", "data", "seed", "epochs"])]
        from_manifest: Option<PathBuf>,
    },
    /// Rank a split with a trained checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        phase: Phase,
        /// Defaults to the regime the checkpoint was trained with.
        #[arg(long)]
        regime: Option<Regime>,
        /// Rank against a seeded subset of this many candidates.
        #[arg(long)]
        candidates_cap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        cap_seed: u64,
        /// Re-encode every candidate for every query instead of caching.
        #[arg(long)]
        uncached: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Give the named check a wrong backward pass (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        task: SyntheticTask,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Bad input on the command line, in a configuration file or in a dataset.
/// Reported with exit code 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Usage(e.into()).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Stats { data, regime } => {
            let (kg, splits) = usage(load_dataset(&data, regime))?;
            print_json(&dataset_stats(&kg, &splits))?;
        }
        Command::Train { config, preset: name, data, out, seed, epochs, from_manifest } => {
            let (cfg, data, out) = match from_manifest {
                Some(path) => {
                    let m = usage(RunManifest::read(&path))?;
                    (m.config, m.data, out.unwrap_or(m.out))
                }
                None => {
                    let mut cfg = resolve_config(config.as_deref(), name.as_deref())?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(e) = epochs {
                        cfg.epochs = e;
                    }
                    usage(cfg.validate())?;
                    let out = out.ok_or_else(|| Usage(anyhow!("--out is required")))?;
                    (cfg, data.expect("clap requires --data"), out)
                }
            };
            train(&cfg, &data, &out)?;
        }
        Command::Eval { checkpoint: dir, data, phase, regime, candidates_cap, cap_seed, uncached } => {
            let ckpt = usage(checkpoint::load(&dir))?;
            let cfg = ckpt.config.clone().unwrap_or_default();
            let regime = regime.unwrap_or(cfg.regime);
            let (kg, splits) = usage(load_dataset(&data, regime))?;
            if ckpt.model.spec.num_relations != kg.num_relations() {
                return Err(Usage(anyhow!(
                    "checkpoint was trained with {} relations but {} has {}",
                    ckpt.model.spec.num_relations,
                    data.display(),
                    kg.num_relations()
                ))
                .into());
            }
            let opts = EvalOptions { phase, candidates_cap, cap_seed, cached: !uncached };
            let report = evaluate_model(&ckpt.model, &kg, &splits, &opts, cfg.neighbour_cap, cfg.seed)?;
            let csv = dir.join(format!("ranks_{phase}.csv"));
            report.write_csv(&csv)?;
            print_json(&report)?;
        }
        Command::Gradcheck { seed, inject_fault } => {
            let report = usage(run_gradcheck(seed, inject_fault.as_deref()))?;
            print_json(&report)?;
            if let Some(f) = report.first_failure() {
                eprintln!(
                    "gradcheck failed: {} has relative error {:.3e} (tolerance {:.0e})",
                    f.op, f.max_relative_error, report.tolerance
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Synth { task, n, seed, out } => {
            usage(write_synthetic(task, n, seed, &out))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn resolve_config(path: Option<&Path>, name: Option<&str>) -> Result<TrainConfig> {
    match (path, name) {
        (Some(p), _) => usage(TrainConfig::from_file(p).with_context(|| format!("loading {}", p.display()))),
        (None, Some(n)) => preset(n).ok_or_else(|| Usage(anyhow!("unknown preset `{n}`")).into()),
        (None, None) => Ok(TrainConfig::default()),
    }
}

fn train(cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    if !data.is_dir() {
        bail!(Usage(anyhow!("dataset directory {} does not exist", data.display())));
    }
    let mut manifest = RunManifest::start("train", cfg, data, out)?;
    manifest.write(out)?;
    match run_training_dir(cfg, data, Some(out)) {
        Ok(outcome) => {
            manifest.finish("completed");
            manifest.write(out)?;
            print_json(&serde_json::json!({
                "configuration": manifest.configuration,
                "best_epoch": outcome.best_epoch,
                "best_valid_mrr": outcome.best_valid_mrr,
                "test": outcome.test,
                "mean_epoch_seconds": outcome.mean_epoch_seconds(),
            }))
        }
        Err(e) => {
            manifest.finish("failed");
            if let Err(w) = manifest.write(out) {
                warn!("could not finalise the run manifest: {w:#}");
            }
            Err(e.into())
        }
    }
}
