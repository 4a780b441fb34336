//! Run orchestration on disk: fresh runs, checkpointing and resume.

use std::fs::{self, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::persist::{fmt9, write_trajectories, TrajectoryHeader};
use crate::policy::{read_checkpoint, write_checkpoint, Adam, Policy};
use crate::report::{csv_text, emit_report, METRICS_SCHEMA, TIMING_SCHEMA};
use crate::rundir::{unix_time, write_atomic, Manifest, RunDir};
use crate::trainer::{init_seed, metric_columns, StepMetrics, StepOutput, Trainer};

pub const ADVANTAGES_SCHEMA: &str = "foldact.advantages/1";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Steps executed by this invocation.
    pub metrics: Vec<StepMetrics>,
    pub completed_steps: usize,
    pub failures: usize,
    pub report_files: Vec<PathBuf>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn advantage_header() -> Vec<String> {
    strings(&["step", "trajectory_id", "turn", "category", "return", "baseline", "advantage"])
}

fn timing_header() -> Vec<String> {
    strings(&["step", "wall_time_s"])
}

fn append_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let file = OpenOptions::new().append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        w.write_record(r).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Drops data rows whose leading step field is `>= step`, keeping the schema and header lines.
fn truncate_rows(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let keep = i < 2 || line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let f = fs::File::open(path).map_err(|_| Error::MissingArtifacts(vec![path.display().to_string()]))?;
    read_checkpoint(&mut BufReader::new(f))
}

fn save_state(dir: &RunDir, trainer: &Trainer) -> Result<()> {
    let step = trainer.step();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, trainer.policy())?;
    write_atomic(&dir.checkpoint(step), &buf)?;
    buf.clear();
    trainer.adam().write_state(&mut buf)?;
    write_atomic(&dir.optimizer_state(step), &buf)
}

fn record_step(dir: &RunDir, trainer: &Trainer, out: &StepOutput) -> Result<()> {
    let m = &out.metrics;
    append_rows(&dir.metrics(), &[m.csv_row()])?;
    append_rows(&dir.timing(), &[vec![m.step.to_string(), fmt9(m.wall_time)]])?;
    let rows: Vec<Vec<String>> = out
        .advantages
        .entries
        .iter()
        .map(|e| {
            vec![
                m.step.to_string(),
                out.batch[e.trajectory].trajectory_id.clone(),
                e.turn.to_string(),
                e.category.as_str().into(),
                fmt9(e.return_used),
                fmt9(e.baseline_used),
                fmt9(e.advantage),
            ]
        })
        .collect();
    append_rows(&dir.advantages(), &rows)?;
    let cfg = trainer.config();
    let completed = m.step + 1;
    if completed % cfg.checkpoint_every == 0 || completed == cfg.total_steps {
        save_state(dir, trainer)?;
        let header = TrajectoryHeader {
            schema: String::new(),
            step: m.step,
            // The batch was sampled by the snapshot taken at the start of the step.
            policy_version: trainer.policy().version() - 1,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            count: 0,
        };
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &header, &out.batch)?;
        write_atomic(&dir.trajectories(m.step), &buf)?;
    }
    Ok(())
}

fn drive(dir: &RunDir, mut trainer: Trainer, mut manifest: Manifest) -> Result<RunSummary> {
    let total = trainer.config().total_steps;
    let mut metrics = Vec::new();
    while trainer.step() < total {
        let out = trainer.train_step()?;
        record_step(dir, &trainer, &out)?;
        if trainer.step() % trainer.config().checkpoint_every == 0 {
            manifest.refresh(dir)?;
            manifest.write(dir)?;
        }
        metrics.push(out.metrics);
    }
    let report_files = emit_report(&[dir.root().to_path_buf()], &dir.report_dir())?;
    manifest.finished_at = Some(unix_time());
    manifest.refresh(dir)?;
    manifest.write(dir)?;
    Ok(RunSummary {
        dir: dir.root().to_path_buf(),
        metrics,
        completed_steps: trainer.step(),
        failures: trainer.failures(),
        report_files,
    })
}

/// Starts a fresh run in `root`, which must not already hold one.
pub fn run(cfg: RunConfig, root: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = RunDir::create(root)?;
    if dir.config().exists() || dir.metrics().exists() {
        return Err(Error::Precondition(format!("{} already holds a run; resume it instead", root.display())));
    }
    write_atomic(&dir.config(), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.metrics(), csv_text(METRICS_SCHEMA, &metric_columns(), &[]).as_bytes())?;
    write_atomic(&dir.timing(), csv_text(TIMING_SCHEMA, &timing_header(), &[]).as_bytes())?;
    write_atomic(&dir.advantages(), csv_text(ADVANTAGES_SCHEMA, &advantage_header(), &[]).as_bytes())?;
    let mut manifest = Manifest::new(cfg.hash(), cfg.seed, init_seed(&cfg));
    let trainer = Trainer::new(cfg)?;
    save_state(&dir, &trainer)?;
    manifest.refresh(&dir)?;
    manifest.write(&dir)?;
    drive(&dir, trainer, manifest)
}

/// Continues a run from its latest checkpoint; `total_steps` may extend it.
pub fn resume(root: &Path, total_steps: Option<usize>) -> Result<RunSummary> {
    let dir = RunDir::new(root);
    let mut cfg = parse_config(&fs::read_to_string(dir.config()).map_err(|_| Error::MissingArtifacts(vec![dir.config().display().to_string()]))?)?;
    let mut manifest = Manifest::read(&dir)?;
    if let Some(t) = total_steps {
        cfg.total_steps = t;
        write_atomic(&dir.config(), cfg.to_toml().as_bytes())?;
        manifest.config_hash = cfg.hash();
    }
    let step = *dir
        .checkpoint_steps()?
        .iter()
        .filter(|&&s| s <= cfg.total_steps)
        .max()
        .ok_or_else(|| Error::MissingArtifacts(vec![dir.checkpoint(0).display().to_string()]))?;
    let policy = load_policy(&dir.checkpoint(step))?;
    let adam = Adam::read_state(&mut BufReader::new(fs::File::open(dir.optimizer_state(step))?))?;
    for p in [dir.metrics(), dir.timing(), dir.advantages()] {
        truncate_rows(&p, step)?;
    }
    manifest.finished_at = None;
    let trainer = Trainer::from_state(cfg, policy, adam, step)?;
    drive(&dir, trainer, manifest)
}

/// Verifies each run's manifest, then writes the report tables for all runs to `out`.
pub fn verified_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    for d in run_dirs {
        let dir = RunDir::new(d);
        Manifest::read(&dir)?.verify(&dir)?;
    }
    emit_report(run_dirs, out)
}

/// The config of the run a checkpoint belongs to, when it sits in a run directory.
pub fn run_config_for_checkpoint(ckpt: &Path) -> Result<Option<RunConfig>> {
    let Some(root) = ckpt.parent().and_then(Path::parent) else { return Ok(None) };
    let path = RunDir::new(root).config();
    if !path.is_file() {
        return Ok(None);
    }
    parse_config(&fs::read_to_string(path)?).map(Some)
}
