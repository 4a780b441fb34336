//! Outer training loop: snapshot, rollout, rewards and advantages, turn
//! selection, loss, one optimizer update, metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BaselineMode, RunConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::losses::{score_response, total_loss, turn_supports, LossBreakdown, LossConfig};
use crate::persist::fmt9;
use crate::policy::{Adam, Policy};
use crate::rewards::{assign_summary_rewards_with, compute_advantages, CategoryAdvantages};
use crate::rollout::{compression_stats, length_bucket, run_batch, DecodeSupport, RolloutConfig, BUCKETS};
use crate::seed::{derive, stream};
use crate::selection::select_training_turns;
use crate::trajectory::Trajectory;
use crate::vocab::Vocab;

/// Per-bucket compression sums; ratios are formed by the report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketSums {
    pub trajectories: usize,
    pub turns: usize,
    pub visible_tokens: usize,
    pub history_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Set when a numeric failure rolled the update back.
    pub failed: bool,
    pub mean_task_reward: f64,
    pub mean_summary_reward: f64,
    /// Mean over trained tokens of `log π_θ − log π_θ_old` after the update.
    pub actor_kl_to_old: f64,
    pub mean_response_length: f64,
    pub trained_turn_fraction: f64,
    pub forward_token_count: usize,
    pub rollout_forward_tokens: usize,
    pub training_forward_tokens: usize,
    pub consistency_forward_tokens: usize,
    pub diagnostic_forward_tokens: usize,
    pub l_summary: f64,
    pub l_action: f64,
    pub l_consistency: f64,
    pub l_total: f64,
    pub clip_fraction_summary: f64,
    pub clip_fraction_action: f64,
    pub dilution_fraction: f64,
    pub clamp_events: usize,
    pub mean_turns: f64,
    pub summary_rate: f64,
    pub truncated_turns: usize,
    pub window_truncations: usize,
    pub compression: [BucketSums; 3],
    /// Seconds; kept out of the deterministic metrics stream.
    pub wall_time: f64,
}

/// Column order of `metrics.csv`.
pub fn metric_columns() -> Vec<String> {
    let mut c: Vec<String> = [
        "step",
        "failed",
        "mean_task_reward",
        "mean_summary_reward",
        "actor_kl_to_old",
        "mean_response_length",
        "trained_turn_fraction",
        "forward_token_count",
        "rollout_forward_tokens",
        "training_forward_tokens",
        "consistency_forward_tokens",
        "diagnostic_forward_tokens",
        "l_summary",
        "l_action",
        "l_consistency",
        "l_total",
        "clip_fraction_summary",
        "clip_fraction_action",
        "dilution_fraction",
        "clamp_events",
        "mean_turns",
        "summary_rate",
        "truncated_turns",
        "window_truncations",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for b in BUCKETS {
        for f in ["trajectories", "turns", "visible_tokens", "history_tokens"] {
            c.push(format!("bucket_{b}_{f}"));
        }
    }
    c
}

impl StepMetrics {
    /// Values in [`metric_columns`] order, reals at 9 significant digits.
    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), u8::from(self.failed).to_string()];
        r.extend(
            [self.mean_task_reward, self.mean_summary_reward, self.actor_kl_to_old, self.mean_response_length, self.trained_turn_fraction]
                .map(fmt9),
        );
        r.extend(
            [
                self.forward_token_count,
                self.rollout_forward_tokens,
                self.training_forward_tokens,
                self.consistency_forward_tokens,
                self.diagnostic_forward_tokens,
            ]
            .map(|x| x.to_string()),
        );
        r.extend(
            [
                self.l_summary,
                self.l_action,
                self.l_consistency,
                self.l_total,
                self.clip_fraction_summary,
                self.clip_fraction_action,
                self.dilution_fraction,
            ]
            .map(fmt9),
        );
        r.push(self.clamp_events.to_string());
        r.extend([self.mean_turns, self.summary_rate].map(fmt9));
        r.extend([self.truncated_turns, self.window_truncations].map(|x| x.to_string()));
        for b in &self.compression {
            r.extend([b.trajectories, b.turns, b.visible_tokens, b.history_tokens].map(|x| x.to_string()));
        }
        r
    }
}

/// Everything a step produced, for persistence.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub batch: Vec<Trajectory>,
    pub advantages: CategoryAdvantages,
    pub selected: Vec<Vec<usize>>,
}

pub struct Trainer {
    cfg: RunConfig,
    vocab: Vocab,
    policy: Policy,
    adam: Adam,
    step: usize,
    failures: usize,
}

pub fn init_seed(cfg: &RunConfig) -> u64 {
    derive(&[stream::INIT, cfg.seed])
}

pub fn task_seeds(seed: u64, step: usize, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive(&[stream::TASK, seed, step as u64, i])).collect()
}

/// Turn selections for a whole batch, one independent draw stream per trajectory.
pub fn select_batch(batch: &[Trajectory], p_drop: f64, seed: u64, step: usize, bias_late_turns: bool) -> Result<Vec<Vec<usize>>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| select_training_turns(t, p_drop, derive(&[stream::SELECT, seed, step as u64, i as u64]), bias_late_turns))
        .collect()
}

/// Rescores the selected turns under the full history with `policy_old`, so
/// full-history training compares like with like. Returns the tokens pushed.
pub fn rescore_on_full_history(
    policy_old: &Policy,
    batch: &mut [Trajectory],
    selected: &[Vec<usize>],
    support: Option<&DecodeSupport>,
) -> Result<usize> {
    let counts: Vec<Result<usize>> = batch
        .par_iter_mut()
        .zip(selected)
        .map(|(traj, sel)| {
            let mut n = 0;
            for &t in sel {
                let h = traj.history_prefix(t).to_vec();
                let turn = &mut traj.turns[t];
                let supports = turn_supports(policy_old, turn, support)?;
                let scored = score_response(policy_old, &h, &turn.response, supports.as_ref())?;
                n += scored.forward_tokens;
                turn.rollout_logprobs = scored.logprobs;
            }
            Ok(n)
        })
        .collect();
    counts.into_iter().sum()
}

/// Mean per-token log-ratio of `policy` against the stored log-probs on the selected turns.
fn log_ratio_diagnostic(
    policy: &Policy,
    batch: &[Trajectory],
    selected: &[Vec<usize>],
    full_history: bool,
    support: Option<&DecodeSupport>,
) -> Result<(f64, usize, usize)> {
    let parts: Vec<Result<(f64, usize, usize)>> = batch
        .par_iter()
        .zip(selected)
        .map(|(traj, sel)| {
            let (mut s, mut n, mut fwd) = (0.0, 0, 0);
            for &t in sel {
                let turn = &traj.turns[t];
                let ctx = if full_history { traj.history_prefix(t) } else { &turn.visible_state.tokens[..] };
                let supports = turn_supports(policy, turn, support)?;
                let scored = score_response(policy, ctx, &turn.response, supports.as_ref())?;
                s += scored.logprobs.iter().zip(&turn.rollout_logprobs).map(|(a, b)| a - b).sum::<f64>();
                n += scored.len();
                fwd += scored.forward_tokens;
            }
            Ok((s, n, fwd))
        })
        .collect();
    let (mut s, mut n, mut fwd) = (0.0, 0, 0);
    for p in parts {
        let (a, b, c) = p?;
        s += a;
        n += b;
        fwd += c;
    }
    Ok((if n == 0 { 0.0 } else { s / n as f64 }, n, fwd))
}

pub fn compression_buckets(batch: &[Trajectory]) -> Result<[BucketSums; 3]> {
    let mut out = [BucketSums::default(); 3];
    for t in batch {
        let c = compression_stats(t)?;
        let b = &mut out[length_bucket(t.len())];
        b.trajectories += 1;
        b.turns += t.len();
        b.visible_tokens += c.visible_tokens;
        b.history_tokens += c.history_tokens;
    }
    Ok(out)
}

/// Training-pass cost of one loss evaluation on a frozen batch.
pub fn training_pass(
    policy: &Policy,
    batch: &[Trajectory],
    adv: &CategoryAdvantages,
    selected: &[Vec<usize>],
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(total_loss(policy, batch, selected, adv, loss)?.1)
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = Policy::init(cfg.policy, cfg.init_std, init_seed(&cfg))?;
        let adam = Adam::new(policy.num_params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        Self::from_state(cfg, policy, adam, 0)
    }

    /// Resumes at `step` completed steps.
    pub fn from_state(cfg: RunConfig, policy: Policy, adam: Adam, step: usize) -> Result<Self> {
        cfg.validate()?;
        if *policy.arch() != cfg.policy {
            return Err(Error::Precondition("checkpoint architecture differs from the config".into()));
        }
        if adam.m.len() != policy.num_params() {
            return Err(Error::Precondition("optimizer state does not match the policy".into()));
        }
        let vocab = Vocab::new(cfg.policy.vocab_size)?;
        Ok(Self { cfg, vocab, policy, adam, step, failures: 0 })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig { seed: derive(&[stream::SAMPLE, self.cfg.seed, self.step as u64]), ..self.cfg.effective_rollout() }
    }

    pub fn train_step(&mut self) -> Result<StepOutput> {
        let started = Instant::now();
        let cfg = self.cfg.clone();
        let step = self.step;
        let old = self.policy.snapshot();

        let seeds = task_seeds(cfg.seed, step, cfg.batch_size);
        let rollout = run_batch(&old, &self.vocab, &cfg.env, &seeds, &self.rollout_config());
        let rollout_metrics = rollout.metrics.clone();
        let mut batch = rollout.into_trajectories()?;
        for t in &mut batch {
            assign_summary_rewards_with(t, &cfg.rewards)?;
        }
        let adv = compute_advantages(&batch, &cfg.advantages)?;
        let selected = select_batch(&batch, cfg.effective_p_drop(), cfg.seed, step, cfg.bias_late_turns)?;
        let loss_cfg = cfg.loss_config();

        let full = cfg.baseline_mode == BaselineMode::FullContextTraining;
        let mut train_batch;
        let mut rescore_tokens = 0;
        let train_on: &[Trajectory] = if full {
            train_batch = batch.clone();
            rescore_tokens = rescore_on_full_history(&old, &mut train_batch, &selected, loss_cfg.support.as_ref())?;
            &train_batch
        } else {
            &batch
        };

        let (graph, b) = total_loss(&self.policy, train_on, &selected, &adv, &loss_cfg)?;
        let before = (self.policy.clone(), self.adam.clone());
        let mut failed = !b.l_total.is_finite();
        if !failed {
            let grad = self.policy.backward(&graph)?;
            failed = grad.iter().any(|g| !g.is_finite())
                || self.adam.step(self.policy.params_mut(), &grad).is_err()
                || !self.policy.all_finite();
        }
        if failed {
            (self.policy, self.adam) = before;
            self.failures += 1;
        }
        let (kl, _, diag_tokens) = log_ratio_diagnostic(&self.policy, train_on, &selected, full, loss_cfg.support.as_ref())?;

        let n = batch.len() as f64;
        let turns: usize = batch.iter().map(|t| t.len()).sum();
        let summary_turns: usize = batch.iter().flat_map(|t| &t.turns).filter(|r| r.summary_emitted).count();
        let summary_reward_sum: f64 = batch.iter().flat_map(|t| &t.summary_rewards).sum();
        let training = b.training_forward_tokens + rescore_tokens;
        let metrics = StepMetrics {
            step,
            failed,
            mean_task_reward: batch.iter().map(|t| t.task_reward).sum::<f64>() / n,
            mean_summary_reward: if summary_turns == 0 { 0.0 } else { summary_reward_sum / summary_turns as f64 },
            actor_kl_to_old: if failed { 0.0 } else { kl },
            mean_response_length: rollout_metrics.response_tokens as f64 / turns as f64,
            trained_turn_fraction: b.trained_turns as f64 / turns as f64,
            forward_token_count: rollout_metrics.forward_tokens + training + b.consistency_forward_tokens + diag_tokens,
            rollout_forward_tokens: rollout_metrics.forward_tokens,
            training_forward_tokens: training,
            consistency_forward_tokens: b.consistency_forward_tokens,
            diagnostic_forward_tokens: diag_tokens,
            l_summary: b.l_summary,
            l_action: b.l_action,
            l_consistency: b.l_consistency,
            l_total: b.l_total,
            clip_fraction_summary: b.clip_fraction[0],
            clip_fraction_action: b.clip_fraction[1],
            dilution_fraction: b.dilution_fraction,
            clamp_events: b.clamp_events,
            mean_turns: turns as f64 / n,
            summary_rate: summary_turns as f64 / turns as f64,
            truncated_turns: rollout_metrics.truncated_turns,
            window_truncations: rollout_metrics.window_truncations + b.window_truncations,
            compression: compression_buckets(&batch)?,
            wall_time: started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(StepOutput { metrics, batch, advantages: adv, selected })
    }
}

/// Greedy-free evaluation summary over fresh tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_turns: f64,
    pub summary_rate: f64,
    pub mean_response_length: f64,
    pub compression_ratio: [Option<f64>; 3],
    pub bucket_trajectories: [usize; 3],
}

/// Runs `episodes` held-out tasks (seeded on the evaluation stream) under `policy`.
pub fn evaluate(policy: &Policy, env: &EnvConfig, rollout: &RolloutConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let vocab = Vocab::new(policy.arch().vocab_size)?;
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| derive(&[stream::EVAL, seed, i])).collect();
    let cfg = RolloutConfig { seed: derive(&[stream::EVAL, seed]), ..rollout.clone() };
    let out = run_batch(policy, &vocab, env, &seeds, &cfg);
    let m = out.metrics.clone();
    let batch = out.into_trajectories()?;
    summarize(&batch, m.response_tokens)
}

pub fn summarize(batch: &[Trajectory], response_tokens: usize) -> Result<EvalSummary> {
    if batch.is_empty() {
        return Err(Error::Precondition("no episodes to summarise".into()));
    }
    let turns: usize = batch.iter().map(|t| t.len()).sum();
    let summaries = batch.iter().flat_map(|t| &t.turns).filter(|r| r.summary_emitted).count();
    let buckets = compression_buckets(batch)?;
    let n = batch.len() as f64;
    Ok(EvalSummary {
        episodes: batch.len(),
        success_rate: batch.iter().map(|t| t.task_reward).sum::<f64>() / n,
        mean_turns: turns as f64 / n,
        summary_rate: summaries as f64 / turns as f64,
        mean_response_length: response_tokens as f64 / turns as f64,
        compression_ratio: buckets.map(|b| (b.trajectories > 0).then(|| b.visible_tokens as f64 / b.history_tokens as f64)),
        bucket_trajectories: buckets.map(|b| b.trajectories),
    })
}
