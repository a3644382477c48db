use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pocketrl::distributed::{Tcp, WorkerIdentity, DEFAULT_TIMEOUT};
use pocketrl::runner::{self, RunConfig};
use pocketrl::{Error, Result};

#[derive(Parser)]
#[command(name = "pocketrl", version, about = "On-policy RL and policy distillation", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with PPO.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of worker processes.
        #[arg(long, requires_all = ["rank", "coordinator"])]
        workers: Option<usize>,
        #[arg(long, requires = "workers")]
        rank: Option<usize>,
        /// `host:port` of rank 0.
        #[arg(long, requires = "workers")]
        coordinator: Option<String>,
    },
    /// Distill an expert into a fresh student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint; defaults to the expert named in the config.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint without learning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        deterministic: bool,
    },
    /// Write the deployment policy of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            workers,
            rank,
            coordinator,
        } => {
            let cfg = load_config(&config, seed, out)?;
            let output = match workers {
                Some(k) if k > 1 => {
                    let id = WorkerIdentity {
                        rank: rank.unwrap_or(0),
                        world_size: k,
                        coordinator: coordinator.unwrap_or_default(),
                    };
                    let tcp = Tcp::connect(&id, DEFAULT_TIMEOUT)?;
                    runner::run_training_with(cfg, Box::new(tcp))?
                }
                Some(0) => return Err(Error::Config("--workers must be >= 1".into())),
                _ => Some(runner::run_training(cfg)?),
            };
            Ok(match output {
                Some(o) => json!({"checkpoint": o.checkpoint, "metrics": o.metrics}),
                None => json!({"checkpoint": null, "metrics": null}),
            })
        }
        Command::Distill { config, teacher } => {
            let cfg = load_config(&config, None, None)?;
            let o = runner::run_distill(cfg, teacher.as_deref())?;
            Ok(json!({"checkpoint": o.checkpoint, "metrics": o.metrics}))
        }
        Command::Eval {
            checkpoint,
            episodes,
            deterministic,
        } => {
            let r = runner::evaluate(&checkpoint, episodes, deterministic)?;
            Ok(json!({
                "episodes": r.episodes,
                "mean_return": r.mean_return,
                "std_return": r.std_return,
                "mean_length": r.mean_length,
                "success_rate": r.success_rate,
            }))
        }
        Command::Export { checkpoint, out } => {
            let p = runner::export_policy(&checkpoint, &out)?;
            Ok(json!({"out": out, "parameters": p.params.numel()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() || matches!(e, Error::Argument(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
