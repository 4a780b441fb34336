//! Summary rewards and per-category advantages.

use serde::{Deserialize, Serialize};

use crate::env::contains_fact;
use crate::error::{Error, Result};
use crate::trajectory::{contains_subsequence, summary_facts, FullHistory, TokenCategory, Trajectory, TurnRecord};

pub const HALLUCINATION_PENALTY: f64 = -0.2;
pub const RETENTION_REWARD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryReward {
    pub hallucination: f64,
    pub retention: f64,
    pub total: f64,
}

/// −0.2 when the summary asserts a fact absent from every observation seen
/// before this turn, or when no observation exists yet; otherwise 0.
pub fn hallucination_penalty(turn: &TurnRecord, history: &FullHistory) -> Result<f64> {
    let block = summary_of(turn)?;
    let prior = history.at_turn(turn.turn_index);
    let observed = prior.observations().any(|o| !o.is_empty());
    let facts = summary_facts(block)?;
    let grounded = observed && facts.iter().all(|f| contains_fact(&prior, f));
    Ok(if grounded { 0.0 } else { HALLUCINATION_PENALTY })
}

/// +0.2 when the episode succeeded and the summary survived into the visible
/// state of a later turn; otherwise 0.
pub fn retention_reward(traj: &Trajectory, turn_index: usize) -> Result<f64> {
    let turn = traj
        .turns
        .get(turn_index)
        .ok_or_else(|| Error::Contract(format!("turn {turn_index} out of range for {} turns", traj.len())))?;
    let block = summary_of(turn)?;
    if traj.task_reward != 1.0 {
        return Ok(0.0);
    }
    let used = traj.turns[turn_index + 1..]
        .iter()
        .any(|later| later.visible_state.has_summary && contains_subsequence(&later.visible_state.tokens, block));
    Ok(if used { RETENTION_REWARD } else { 0.0 })
}

fn summary_of(turn: &TurnRecord) -> Result<&[crate::vocab::Token]> {
    if !turn.summary_emitted {
        return Err(Error::Contract(format!("turn {} emitted no summary", turn.turn_index)));
    }
    turn.summary_block().ok_or_else(|| Error::Contract(format!("turn {} summary does not parse", turn.turn_index)))
}

/// Both components for one turn; zero on turns without a summary.
///
/// Retention is only granted to grounded summaries, so the two never combine.
pub fn summary_reward(traj: &Trajectory, turn_index: usize) -> Result<SummaryReward> {
    let turn = traj
        .turns
        .get(turn_index)
        .ok_or_else(|| Error::Contract(format!("turn {turn_index} out of range for {} turns", traj.len())))?;
    if !turn.summary_emitted {
        return Ok(SummaryReward::default());
    }
    let hallucination = hallucination_penalty(turn, &traj.full_history)?;
    let retention = if hallucination == 0.0 { retention_reward(traj, turn_index)? } else { 0.0 };
    Ok(SummaryReward { hallucination, retention, total: hallucination + retention })
}

/// Reward magnitudes used when filling trajectories; defaults are −0.2 and +0.2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub hallucination_penalty: f64,
    pub retention_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { hallucination_penalty: HALLUCINATION_PENALTY, retention_reward: RETENTION_REWARD }
    }
}

/// Fills `traj.summary_rewards` with the per-turn totals.
pub fn assign_summary_rewards(traj: &mut Trajectory) -> Result<()> {
    assign_summary_rewards_with(traj, &RewardConfig::default())
}

/// As [`assign_summary_rewards`], with the two magnitudes taken from `cfg`.
pub fn assign_summary_rewards_with(traj: &mut Trajectory, cfg: &RewardConfig) -> Result<()> {
    traj.summary_rewards = (0..traj.len())
        .map(|t| {
            let r = summary_reward(traj, t)?;
            let h = if r.hallucination != 0.0 { cfg.hallucination_penalty } else { 0.0 };
            let k = if r.retention != 0.0 { cfg.retention_reward } else { 0.0 };
            Ok(h + k)
        })
        .collect::<Result<_>>()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    /// Divide centred returns by the batch standard deviation (floored at 1e-8).
    pub standardize: bool,
    /// Summary returns add the terminal task reward to the summary reward.
    pub summary_return_includes_task: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { standardize: true, summary_return_includes_task: true }
    }
}

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEntry {
    pub trajectory: usize,
    pub turn: usize,
    pub category: TokenCategory,
    pub return_used: f64,
    pub baseline_used: f64,
    pub advantage: f64,
}

/// Advantages for every (trajectory, turn, category) that has tokens of that category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryAdvantages {
    pub entries: Vec<AdvantageEntry>,
    /// `index[traj][turn][category]` into `entries`.
    index: Vec<Vec<[Option<usize>; 2]>>,
}

fn slot(c: TokenCategory) -> usize {
    match c {
        TokenCategory::Summary => 0,
        TokenCategory::Action => 1,
    }
}

impl CategoryAdvantages {
    pub fn get(&self, traj: usize, turn: usize, c: TokenCategory) -> Option<f64> {
        let i = (*self.index.get(traj)?.get(turn)?)[slot(c)]?;
        Some(self.entries[i].advantage)
    }

    pub fn entry(&self, traj: usize, turn: usize, c: TokenCategory) -> Option<&AdvantageEntry> {
        let i = (*self.index.get(traj)?.get(turn)?)[slot(c)]?;
        Some(&self.entries[i])
    }

    /// Replaces every advantage of category `c`.
    pub fn set_category(&mut self, c: TokenCategory, value: f64) {
        self.entries.iter_mut().filter(|e| e.category == c).for_each(|e| e.advantage = value);
    }

    /// Sets one existing entry.
    pub fn set(&mut self, traj: usize, turn: usize, c: TokenCategory, value: f64) {
        if let Some(i) = self.index.get(traj).and_then(|t| t.get(turn)).and_then(|s| s[slot(c)]) {
            self.entries[i].advantage = value;
        }
    }
}

/// Returns per category, centred on the batch mean and optionally standardised.
///
/// The action return of every turn is the terminal task reward; the summary
/// return of a summary turn is its summary reward, plus the task reward when
/// `summary_return_includes_task` is set.
pub fn compute_advantages(batch: &[Trajectory], cfg: &AdvantageConfig) -> Result<CategoryAdvantages> {
    if batch.is_empty() {
        return Err(Error::Precondition("advantage batch is empty".into()));
    }
    let mut adv = CategoryAdvantages { entries: Vec::new(), index: Vec::with_capacity(batch.len()) };
    for (ti, traj) in batch.iter().enumerate() {
        let mut slots = Vec::with_capacity(traj.len());
        for (t, turn) in traj.turns.iter().enumerate() {
            let mut s = [None, None];
            for c in TokenCategory::ALL {
                if turn.masks.count(c) == 0 {
                    continue;
                }
                let ret = match c {
                    TokenCategory::Action => traj.task_reward,
                    TokenCategory::Summary => {
                        let r = traj.summary_rewards.get(t).copied().unwrap_or(0.0);
                        if cfg.summary_return_includes_task {
                            r + traj.task_reward
                        } else {
                            r
                        }
                    }
                };
                s[slot(c)] = Some(adv.entries.len());
                adv.entries.push(AdvantageEntry {
                    trajectory: ti,
                    turn: t,
                    category: c,
                    return_used: ret,
                    baseline_used: 0.0,
                    advantage: 0.0,
                });
            }
            slots.push(s);
        }
        adv.index.push(slots);
    }
    for c in TokenCategory::ALL {
        let idx: Vec<usize> = (0..adv.entries.len()).filter(|&i| adv.entries[i].category == c).collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| adv.entries[i].return_used).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (adv.entries[i].return_used - mean).powi(2)).sum::<f64>() / n;
        let scale = if cfg.standardize { var.sqrt().max(STD_FLOOR) } else { 1.0 };
        for &i in &idx {
            let e = &mut adv.entries[i];
            e.baseline_used = mean;
            e.advantage = (e.return_used - mean) / scale;
            if !e.advantage.is_finite() {
                return Err(Error::Numeric(format!("advantage at trajectory {} turn {} is not finite", e.trajectory, e.turn)));
            }
        }
    }
    Ok(adv)
}
