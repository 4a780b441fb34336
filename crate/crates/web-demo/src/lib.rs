//! Browser bindings for folding a single episode and pricing turn dropping,
//! plus a splitter that shows which tokens of a response are summary tokens.
//!
//! Every export returns a JSON string; failures become
//! `{"error":{"kind","message"}}` so the page can render them as data.

use foldact::env::{generate_task, EnvConfig};
use foldact::policy::{Arch, Policy};
use foldact::rewards::assign_summary_rewards;
use foldact::rollout::{run_episode, RolloutConfig};
use foldact::selection::select_training_turns;
use foldact::trajectory::{build_category_mask, parse_summary, TokenCategory, Trajectory};
use foldact::vocab::{parse_tokens, Vocab};
use foldact::Result;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const INIT_STD: f64 = 0.1;
/// Selection seeds averaged per drop rate.
const SELECTION_DRAWS: u64 = 32;

fn to_json(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string(),
    }
}

fn rollout_config(fold_trigger: u32) -> RolloutConfig {
    RolloutConfig { fold_trigger_len: (fold_trigger > 0).then_some(fold_trigger as usize), ..Default::default() }
}

fn episode(task_seed: u32, policy_seed: u32, fold_trigger: u32) -> Result<Trajectory> {
    let arch = Arch::default();
    let vocab = Vocab::new(arch.vocab_size)?;
    let policy = Policy::init(arch, INIT_STD, policy_seed as u64)?;
    let task = generate_task(&vocab, &EnvConfig::toy(), task_seed as u64)?;
    let mut traj = run_episode(&policy, &vocab, &task, &rollout_config(fold_trigger))?.trajectory;
    assign_summary_rewards(&mut traj)?;
    Ok(traj)
}

/// Per-turn visible and full-history lengths for one episode of an untrained
/// policy; `fold_trigger` 0 disables folding.
pub fn timeline_value(task_seed: u32, policy_seed: u32, fold_trigger: u32) -> Result<Value> {
    let traj = episode(task_seed, policy_seed, fold_trigger)?;
    let turns: Vec<Value> = traj
        .turns
        .iter()
        .enumerate()
        .map(|(t, turn)| {
            json!({
                "turn": t,
                "visible": turn.visible_state.len(),
                "history": traj.full_history.prefix_tokens(t).len(),
                "summary": turn.summary_emitted,
                "summary_reward": traj.summary_rewards.get(t).copied().unwrap_or(0.0),
                "response": foldact::vocab::render(&turn.response),
            })
        })
        .collect();
    Ok(json!({ "task_reward": traj.task_reward, "turns": turns }))
}

/// Mean tokens entering the loss per episode as the drop rate varies, over a
/// small batch of untrained-policy episodes.
pub fn drop_cost_value(batch_seed: u32, fold_trigger: u32) -> Result<Value> {
    let batch: Vec<Trajectory> =
        (0..8).map(|i| episode(batch_seed.wrapping_mul(8).wrapping_add(i), batch_seed, fold_trigger)).collect::<Result<_>>()?;
    let cost = |t: &Trajectory, turn: usize| t.turns[turn].visible_state.len() + t.turns[turn].response.len();
    let full: usize = batch.iter().map(|t| (0..t.len()).map(|i| cost(t, i)).sum::<usize>()).sum();
    let mut rows = Vec::new();
    for p_drop in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let mut total = 0usize;
        for s in 0..SELECTION_DRAWS {
            for (k, t) in batch.iter().enumerate() {
                let selected = select_training_turns(t, p_drop, s * 8 + k as u64, false)?;
                total += selected.iter().map(|&i| cost(t, i)).sum::<usize>();
            }
        }
        let mean = total as f64 / (SELECTION_DRAWS as f64 * batch.len() as f64);
        rows.push(json!({ "p_drop": p_drop, "tokens": mean, "ratio": mean * batch.len() as f64 / full as f64 }));
    }
    Ok(json!({ "episodes": batch.len(), "rows": rows }))
}

/// Category of every token in a whitespace-separated response.
pub fn explain_value(text: &str) -> Result<Value> {
    let tokens = parse_tokens(text)?;
    let mask = build_category_mask(&tokens)?;
    let span = parse_summary(&tokens)?;
    let cats: Vec<Value> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let c = if mask.summary_mask()[i] { "summary" } else { "action" };
            json!({ "token": t.to_string(), "category": c })
        })
        .collect();
    Ok(json!({
        "tokens": cats,
        "summary_tokens": mask.count(TokenCategory::Summary),
        "action_tokens": mask.count(TokenCategory::Action),
        "has_summary": span.is_some(),
    }))
}

#[wasm_bindgen]
pub fn timeline(task_seed: u32, policy_seed: u32, fold_trigger: u32) -> String {
    to_json(timeline_value(task_seed, policy_seed, fold_trigger))
}

#[wasm_bindgen]
pub fn drop_cost(batch_seed: u32, fold_trigger: u32) -> String {
    to_json(drop_cost_value(batch_seed, fold_trigger))
}

#[wasm_bindgen]
pub fn explain(text: &str) -> String {
    to_json(explain_value(text))
}
