//! `foldact` command-line entry point.
//!
//! Results go to stdout as JSON. Failures print one JSON error record to
//! stderr and exit nonzero: 2 for usage errors, 1 for everything else.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use foldact::config::{load_config, RunConfig};
use foldact::persist::{read_tasks, write_trajectories, TrajectoryHeader};
use foldact::rollout::run_tasks;
use foldact::run::{load_policy, resume, run, run_config_for_checkpoint, verified_report};
use foldact::seed::{derive, stream};
use foldact::trainer::evaluate;
use foldact::vocab::Vocab;
use foldact::Error;
use serde_json::{json, Value};

const SEED_VAR: &str = "FOLDACT_SEED";

#[derive(Parser)]
#[command(name = "foldact", version, about = "Train and inspect context-folding agents on synthetic retrieval tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<config file stem>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run in --out from its latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out a checkpoint on a task file and write the trajectories.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Config for decoding settings; defaults to the checkpoint's run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL file; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on fresh tasks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        episodes: usize,
    },
    /// Write cost, compression, stability and comparison tables.
    Report {
        /// Run directory; repeat to compare baseline modes.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to the first run's report/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_VAR) {
        Err(_) => Ok(None),
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::Config {
            key: SEED_VAR.into(),
            reason: format!("expected a non-negative integer, got {v:?}"),
        }),
    }
}

fn with_seed(mut cfg: RunConfig) -> Result<RunConfig, Error> {
    if let Some(s) = seed_override()? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit config, else the checkpoint's run config, else defaults.
fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig, Error> {
    let cfg = match explicit {
        Some(p) => load_config(p)?,
        None => run_config_for_checkpoint(ckpt)?.unwrap_or_default(),
    };
    with_seed(cfg)
}

fn paths(ps: &[PathBuf]) -> Vec<String> {
    ps.iter().map(|p| p.display().to_string()).collect()
}

fn execute(cmd: Command) -> Result<Value, Error> {
    match cmd {
        Command::Train { config, out, resume: cont } => {
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
                PathBuf::from("runs").join(stem)
            });
            let cfg = with_seed(load_config(&config)?)?;
            let summary = if cont { resume(&out, Some(cfg.total_steps))? } else { run(cfg, &out)? };
            let last = summary.metrics.last();
            Ok(json!({
                "command": "train",
                "run": summary.dir.display().to_string(),
                "completed_steps": summary.completed_steps,
                "failed_steps": summary.failures,
                "final_mean_task_reward": last.map(|m| m.mean_task_reward),
                "report": paths(&summary.report_files),
            }))
        }
        Command::Rollout { ckpt, tasks, config, out } => {
            let policy = load_policy(&ckpt)?;
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let vocab = Vocab::new(policy.arch().vocab_size)?;
            let file = fs::File::open(&tasks).map_err(|_| Error::MissingArtifacts(vec![tasks.display().to_string()]))?;
            let tasks = read_tasks(BufReader::new(file), &tasks.display().to_string(), &vocab)?;
            let rollout = foldact::rollout::RolloutConfig {
                seed: derive(&[stream::SAMPLE, cfg.seed, u64::MAX]),
                ..cfg.effective_rollout()
            };
            rollout.validate(policy.arch().window)?;
            let batch = run_tasks(&policy, &vocab, &tasks, &rollout).into_trajectories()?;
            let header = TrajectoryHeader {
                schema: String::new(),
                step: 0,
                policy_version: policy.version(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                count: 0,
            };
            let mut buf = Vec::new();
            write_trajectories(&mut buf, &header, &batch)?;
            let successes = batch.iter().filter(|t| t.task_reward > 0.0).count();
            match out {
                Some(p) => {
                    fs::write(&p, &buf)?;
                    Ok(json!({
                        "command": "rollout",
                        "trajectories": batch.len(),
                        "successes": successes,
                        "out": p.display().to_string(),
                    }))
                }
                None => {
                    std::io::stdout().write_all(&buf)?;
                    Ok(Value::Null)
                }
            }
        }
        Command::Eval { ckpt, config, episodes } => {
            if episodes == 0 {
                return Err(Error::Config { key: "episodes".into(), reason: "must be positive".into() });
            }
            let policy = load_policy(&ckpt)?;
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let summary = evaluate(&policy, &cfg.env, &cfg.effective_rollout(), episodes, cfg.seed)?;
            Ok(json!({ "command": "eval", "checkpoint": ckpt.display().to_string(), "summary": summary }))
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].join("report"));
            let files = verified_report(&runs, &out)?;
            Ok(json!({ "command": "report", "files": paths(&files) }))
        }
    }
}

fn error_record(kind: &str, message: String, key: Option<&str>) -> String {
    let mut rec = json!({ "error": { "kind": kind, "message": message } });
    if let Some(k) = key {
        rec["error"]["key"] = json!(k);
    }
    rec.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", error_record("usage", first, None));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let key = match &e {
                Error::Config { key, .. } => Some(key.as_str()),
                _ => None,
            };
            eprintln!("{}", error_record(e.kind(), e.to_string(), key));
            ExitCode::FAILURE
        }
    }
}
