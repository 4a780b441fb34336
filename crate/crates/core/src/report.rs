//! Report tables built from persisted run artifacts: cost per baseline mode,
//! compression by trajectory length, and per-step stability curves.
//!
//! Every table is a pure function of the runs' `config`, `metrics.csv` and
//! `timing.csv`, so regenerating a report is byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{parse_config, BaselineMode, RunConfig};
use crate::error::{Error, Result};
use crate::persist::fmt9;
use crate::rollout::BUCKETS;
use crate::rundir::{write_atomic, RunDir};

pub const METRICS_SCHEMA: &str = "foldact.metrics/1";
pub const TIMING_SCHEMA: &str = "foldact.timing/1";
pub const COST_SCHEMA: &str = "foldact.report.cost/1";
pub const COMPRESSION_SCHEMA: &str = "foldact.report.compression/1";
pub const STABILITY_SCHEMA: &str = "foldact.report.stability/1";
pub const COMPARISON_SCHEMA: &str = "foldact.report.comparison/1";

/// Steps averaged at each end of a run in the comparison table.
pub const COMPARISON_WINDOW: usize = 20;

/// Writes `# schema: <name>` followed by the rows as CSV.
pub fn csv_text(schema: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    format!("# schema: {schema}\n{body}")
}

/// A schema-checked CSV table with named columns.
#[derive(Clone, Debug)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn parse(text: &str, schema: &str, path: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        if first != format!("# schema: {schema}") {
            return Err(Error::format(path, format!("expected schema line for {schema}")));
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(|e| Error::format(path, e.to_string()))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let index = header.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        Ok(Self { header, rows, index })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::format(name, "column missing from table"))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| r[c].parse::<f64>().map_err(|e| Error::format(name, format!("{e} in {:?}", r[c]))))
            .collect()
    }
}

/// One run as the report sees it.
#[derive(Clone, Debug)]
pub struct RunData {
    pub name: String,
    pub config: RunConfig,
    pub metrics: Table,
    pub timing: Table,
}

impl RunData {
    pub fn mode(&self) -> BaselineMode {
        self.config.baseline_mode
    }
}

pub fn load_run(root: &Path) -> Result<RunData> {
    let dir = RunDir::new(root);
    let files = [dir.config(), dir.metrics(), dir.timing()];
    let missing: Vec<String> = files.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let config = parse_config(&fs::read_to_string(dir.config())?)?;
    let metrics = Table::parse(&fs::read_to_string(dir.metrics())?, METRICS_SCHEMA, "metrics.csv")?;
    let timing = Table::parse(&fs::read_to_string(dir.timing())?, TIMING_SCHEMA, "timing.csv")?;
    if metrics.rows.len() != timing.rows.len() {
        return Err(Error::format("timing.csv", "row count differs from metrics.csv"));
    }
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Ok(RunData { name, config, metrics, timing })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt9).unwrap_or_default()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportTables {
    pub cost: String,
    pub compression: String,
    pub stability: String,
    pub comparison: String,
}

impl ReportTables {
    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            ("cost.csv", &self.cost),
            ("compression.csv", &self.compression),
            ("stability.csv", &self.stability),
            ("comparison.csv", &self.comparison),
        ]
    }
}

/// Per-run cost means; ratios are relative to the first full-context-training run, if any.
fn cost_table(runs: &[RunData]) -> Result<String> {
    let mut means = Vec::new();
    for r in runs {
        let m = |c: &str| -> Result<Option<f64>> { Ok(mean(&r.metrics.f64s(c)?)) };
        means.push([
            m("forward_token_count")?,
            m("rollout_forward_tokens")?,
            m("training_forward_tokens")?,
            m("consistency_forward_tokens")?,
            m("diagnostic_forward_tokens")?,
            mean(&r.timing.f64s("wall_time_s")?),
        ]);
    }
    let reference = runs.iter().position(|r| r.mode() == BaselineMode::FullContextTraining).map(|i| means[i]);
    let ratio = |x: Option<f64>, base: Option<f64>| match (x, base) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let header = strings(&[
        "run",
        "baseline_mode",
        "steps",
        "forward_tokens_per_step",
        "rollout_tokens_per_step",
        "training_tokens_per_step",
        "consistency_tokens_per_step",
        "diagnostic_tokens_per_step",
        "wall_time_s_per_step",
        "forward_ratio_vs_full_context",
        "training_ratio_vs_full_context",
        "wall_time_ratio_vs_full_context",
    ]);
    let rows = runs
        .iter()
        .zip(&means)
        .map(|(r, m)| {
            let mut row = vec![r.name.clone(), r.mode().as_str().into(), r.metrics.rows.len().to_string()];
            row.extend(m.iter().map(|x| opt(*x)));
            let base = reference.unwrap_or([None; 6]);
            let train = |v: &[Option<f64>; 6]| v[2].zip(v[3]).map(|(a, b)| a + b);
            row.push(opt(ratio(m[0], base[0])));
            row.push(opt(ratio(train(m), train(&base))));
            row.push(opt(ratio(m[5], base[5])));
            row
        })
        .collect::<Vec<_>>();
    Ok(csv_text(COST_SCHEMA, &header, &rows))
}

fn compression_table(runs: &[RunData]) -> Result<String> {
    let header = strings(&[
        "run",
        "baseline_mode",
        "bucket",
        "trajectories",
        "turns",
        "avg_visible_len_per_turn",
        "compression_ratio",
    ]);
    let mut rows = Vec::new();
    for r in runs {
        for b in BUCKETS {
            let sum = |f: &str| -> Result<f64> { Ok(r.metrics.f64s(&format!("bucket_{b}_{f}"))?.iter().sum()) };
            let (n, turns, vis, hist) = (sum("trajectories")?, sum("turns")?, sum("visible_tokens")?, sum("history_tokens")?);
            rows.push(vec![
                r.name.clone(),
                r.mode().as_str().into(),
                b.into(),
                format!("{n}"),
                format!("{turns}"),
                opt((turns > 0.0).then(|| vis / turns)),
                opt((hist > 0.0).then(|| vis / hist)),
            ]);
        }
    }
    Ok(csv_text(COMPRESSION_SCHEMA, &header, &rows))
}

const STABILITY_COLUMNS: [&str; 5] = ["actor_kl_to_old", "mean_response_length", "mean_task_reward", "l_consistency", "failed"];

fn stability_table(runs: &[RunData]) -> Result<String> {
    let mut header = strings(&["run", "baseline_mode", "step"]);
    header.extend(strings(&STABILITY_COLUMNS));
    let mut rows = Vec::new();
    for r in runs {
        let step = r.metrics.column("step")?;
        let cols = STABILITY_COLUMNS.iter().map(|c| r.metrics.column(c)).collect::<Result<Vec<_>>>()?;
        for m in &r.metrics.rows {
            let mut row = vec![r.name.clone(), r.mode().as_str().into(), m[step].clone()];
            row.extend(cols.iter().map(|&c| m[c].clone()));
            rows.push(row);
        }
    }
    Ok(csv_text(STABILITY_SCHEMA, &header, &rows))
}

/// Start-versus-end summary of the stability curves, one row per run.
fn comparison_table(runs: &[RunData]) -> Result<String> {
    let header = strings(&[
        "run",
        "baseline_mode",
        "steps",
        "window",
        "kl_first",
        "kl_last",
        "max_abs_kl",
        "response_length_first",
        "response_length_last",
        "task_reward_first",
        "task_reward_last",
        "failed_steps",
    ]);
    let mut rows = Vec::new();
    for r in runs {
        let kl = r.metrics.f64s("actor_kl_to_old")?;
        let len = r.metrics.f64s("mean_response_length")?;
        let rew = r.metrics.f64s("mean_task_reward")?;
        let failed = r.metrics.f64s("failed")?.iter().filter(|&&x| x != 0.0).count();
        let w = COMPARISON_WINDOW.min(kl.len());
        let first = |xs: &[f64]| mean(&xs[..w]);
        let last = |xs: &[f64]| mean(&xs[xs.len() - w..]);
        rows.push(vec![
            r.name.clone(),
            r.mode().as_str().into(),
            kl.len().to_string(),
            w.to_string(),
            opt(first(&kl)),
            opt(last(&kl)),
            opt(kl.iter().map(|x| x.abs()).reduce(f64::max)),
            opt(first(&len)),
            opt(last(&len)),
            opt(first(&rew)),
            opt(last(&rew)),
            failed.to_string(),
        ]);
    }
    Ok(csv_text(COMPARISON_SCHEMA, &header, &rows))
}

pub fn build_tables(runs: &[RunData]) -> Result<ReportTables> {
    if runs.is_empty() {
        return Err(Error::Precondition("a report needs at least one run".into()));
    }
    Ok(ReportTables {
        cost: cost_table(runs)?,
        compression: compression_table(runs)?,
        stability: stability_table(runs)?,
        comparison: comparison_table(runs)?,
    })
}

/// Loads every run, builds the tables and writes them under `out`.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let tables = build_tables(&runs)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (name, text) in tables.files() {
        let p = out.join(name);
        write_atomic(&p, text.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
