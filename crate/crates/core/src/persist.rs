//! Line-delimited JSON persistence for trajectories and task lists, and the
//! decimal formatting shared by every text artifact.
//!
//! Every file starts with a header record naming its schema; each following
//! line holds one record. Masks are stored as `0`/`1` strings and all reals
//! are rounded to 9 significant digits.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{generate_task, EnvConfig, Task};
use crate::error::{Error, Result};
use crate::trajectory::{append_turn, CategoryMask, Trajectory, TurnRecord, VisibleState};
use crate::vocab::{Token, Vocab};

pub const TRAJECTORY_SCHEMA: &str = "foldact.trajectories/1";
pub const TASK_SCHEMA: &str = "foldact.tasks/1";

/// Rounds to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Shortest decimal text of `round9(x)`.
pub fn fmt9(x: f64) -> String {
    format!("{}", round9(x))
}

fn mask_to_bits(m: &CategoryMask) -> String {
    m.summary_mask().iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub schema: String,
    pub step: usize,
    pub policy_version: u64,
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnLine {
    turn_index: usize,
    visible_state: Vec<Token>,
    has_summary: bool,
    response: Vec<Token>,
    summary_mask: String,
    rollout_logprobs: Vec<f64>,
    observation: Vec<Token>,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    trajectory_id: String,
    s0: Vec<Token>,
    task_reward: f64,
    summary_rewards: Vec<f64>,
    turns: Vec<TurnLine>,
}

pub fn write_trajectories(w: &mut impl Write, header: &TrajectoryHeader, batch: &[Trajectory]) -> Result<()> {
    let header = TrajectoryHeader { schema: TRAJECTORY_SCHEMA.into(), count: batch.len(), ..header.clone() };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for t in batch {
        let line = TrajectoryLine {
            trajectory_id: t.trajectory_id.clone(),
            s0: t.s0.clone(),
            task_reward: t.task_reward,
            summary_rewards: t.summary_rewards.iter().map(|&x| round9(x)).collect(),
            turns: t
                .turns
                .iter()
                .map(|r| TurnLine {
                    turn_index: r.turn_index,
                    visible_state: r.visible_state.tokens.clone(),
                    has_summary: r.visible_state.has_summary,
                    response: r.response.clone(),
                    summary_mask: mask_to_bits(&r.masks),
                    rollout_logprobs: r.rollout_logprobs.iter().map(|&x| round9(x)).collect(),
                    observation: r.observation.clone(),
                    truncated: r.truncated,
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads and revalidates a trajectory file; `path` only labels errors.
pub fn read_trajectories(r: impl BufRead, path: &str) -> Result<(TrajectoryHeader, Vec<Trajectory>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::format(path, "empty file"))??;
    let header: TrajectoryHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.schema != TRAJECTORY_SCHEMA {
        return Err(Error::format(path, format!("unsupported schema {}", header.schema)));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::format(path, format!("line {}: {e}", n + 2));
        let rec: TrajectoryLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let mut t = Trajectory::new(rec.trajectory_id, rec.s0);
        for tl in rec.turns {
            let bits: Vec<bool> = tl
                .summary_mask
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(at(format!("mask character {c:?}"))),
                })
                .collect::<Result<_>>()?;
            let masks = CategoryMask::from_summary_bits(bits);
            let turn = TurnRecord {
                turn_index: tl.turn_index,
                visible_state: VisibleState { tokens: tl.visible_state, has_summary: tl.has_summary },
                summary_emitted: masks.count(crate::trajectory::TokenCategory::Summary) > 0,
                response: tl.response,
                masks,
                rollout_logprobs: tl.rollout_logprobs,
                observation: tl.observation,
                truncated: tl.truncated,
            };
            t = append_turn(t, turn).map_err(|e| at(e.to_string()))?;
        }
        t.task_reward = rec.task_reward;
        t.summary_rewards = rec.summary_rewards;
        t.validate().map_err(|e| at(e.to_string()))?;
        out.push(t);
    }
    if out.len() != header.count {
        return Err(Error::format(path, format!("header announces {} trajectories, found {}", header.count, out.len())));
    }
    Ok((header, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFileHeader {
    pub schema: String,
    /// Environment used for records that give only a seed.
    #[serde(default)]
    pub env: EnvConfig,
}

/// One line of a task file: a seed to generate from, or a fully spelled-out task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRecord {
    Seed { seed: u64 },
    Task(Task),
}

pub fn write_tasks(w: &mut impl Write, env: &EnvConfig, tasks: &[TaskRecord]) -> Result<()> {
    serde_json::to_writer(&mut *w, &TaskFileHeader { schema: TASK_SCHEMA.into(), env: env.clone() })?;
    w.write_all(b"\n")?;
    for t in tasks {
        serde_json::to_writer(&mut *w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a task file and materialises every record against `vocab`.
pub fn read_tasks(r: impl BufRead, path: &str, vocab: &Vocab) -> Result<Vec<Task>> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| Error::format(path, "empty file"))??;
    let header: TaskFileHeader = serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.schema != TASK_SCHEMA {
        return Err(Error::format(path, format!("unsupported schema {}", header.schema)));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::format(path, format!("line {}: {e}", n + 2));
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let task = match rec {
            TaskRecord::Seed { seed } => generate_task(vocab, &header.env, seed).map_err(|e| at(e.to_string()))?,
            TaskRecord::Task(t) => {
                vocab.check(&t.s0).map_err(|e| at(e.to_string()))?;
                vocab.check(&t.chain.keys).map_err(|e| at(e.to_string()))?;
                vocab.check(&t.chain.values).map_err(|e| at(e.to_string()))?;
                t
            }
        };
        out.push(task);
    }
    Ok(out)
}
