//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use foldact::env::{generate_task, Env, EnvConfig, Task};
use foldact::policy::{Arch, LossGraph, Policy, ScoredResponse};
use foldact::rewards::assign_summary_rewards;
use foldact::rollout::{run_batch, RolloutConfig};
use foldact::trajectory::{append_turn, build_category_mask, parse_summary, TokenCategory, Trajectory, TurnRecord, VisibleState};
use foldact::vocab::{Token, Vocab};

/// `|a - n| / max(|a|, |n|, 1e-5)`; the floor keeps near-zero coordinates
/// from amplifying finite-difference noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Central finite differences of `f` with respect to every parameter.
pub fn central_difference(p: &Policy, step: f64, f: impl Fn(&Policy) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.num_params())
        .map(|i| {
            let x = q.params()[i];
            q.params_mut()[i] = x + step;
            let up = f(&q);
            q.params_mut()[i] = x - step;
            let down = f(&q);
            q.params_mut()[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest policy that still hosts the environment; under 2,000 parameters.
pub fn grad_arch() -> Arch {
    Arch { vocab_size: 24, d_model: 6, n_layers: 2, n_heads: 2, window: 64 }
}

pub fn grad_env() -> EnvConfig {
    EnvConfig { hops: 2, distractors: 2, padding: 2, max_hops: 8, ..EnvConfig::toy() }
}

/// Short rolled-out trajectories with summary rewards filled in.
pub fn small_batch(policy: &Policy, n: usize, fold: Option<usize>) -> Vec<Trajectory> {
    let vocab = Vocab::new(policy.arch().vocab_size).unwrap();
    let cfg = RolloutConfig { fold_trigger_len: fold, max_turns: Some(4), ..Default::default() };
    let seeds: Vec<u64> = (0..n as u64).collect();
    let mut out = run_batch(policy, &vocab, &grad_env(), &seeds, &cfg).into_trajectories().unwrap();
    for t in &mut out {
        assign_summary_rewards(t).unwrap();
    }
    out
}

/// `Σ_i coeff_i ∇ log π(response_i)`, assembled token by token.
pub fn logprob_gradient(
    policy: &Policy,
    context: &[Token],
    response: &[Token],
    supports: Option<Vec<Vec<Token>>>,
    coeffs: &[(usize, f64)],
) -> Vec<f64> {
    let mut total = vec![0.0; policy.num_params()];
    for &(i, c) in coeffs {
        let mut s = match &supports {
            Some(sup) => ScoredResponse::score_restricted(policy, context, response, sup.clone()).unwrap(),
            None => ScoredResponse::score(policy, context, response).unwrap(),
        };
        s.seed_logprob(i, c);
        if !s.has_seeds() {
            continue;
        }
        let mut g = LossGraph::new();
        g.push(s);
        for (t, x) in total.iter_mut().zip(policy.backward(&g).unwrap()) {
            *t += x;
        }
    }
    total
}

pub fn category_positions(turn: &TurnRecord, c: TokenCategory) -> Vec<usize> {
    turn.masks.positions(c).collect()
}

/// One scripted turn: an optional summary block, then the action.
pub struct Scripted {
    pub summary: Option<Vec<Token>>,
    pub action: Vec<Token>,
}

pub fn act(action: &[Token]) -> Scripted {
    Scripted { summary: None, action: action.to_vec() }
}

pub fn fold(summary: &[Token], action: &[Token]) -> Scripted {
    Scripted { summary: Some(summary.to_vec()), action: action.to_vec() }
}

/// Plays a scripted episode through the real environment.
///
/// A turn with a summary replaces the next visible state by the question
/// block followed by that summary.
pub fn scripted_episode(vocab: &Vocab, task: &Task, turns: &[Scripted]) -> Trajectory {
    let mut env = Env::new(*vocab, task.clone(), 2 * task.chain.hops() + 4);
    let mut traj = Trajectory::new(format!("scripted-{}", task.seed), task.s0.clone());
    let mut visible = VisibleState::initial(&task.s0);
    for (t, s) in turns.iter().enumerate() {
        let mut response = s.summary.clone().unwrap_or_default();
        response.extend(&s.action);
        let step = env.step(&s.action).unwrap();
        let masks = build_category_mask(&response).unwrap();
        let next = match parse_summary(&response).unwrap() {
            Some(span) => {
                let mut tokens = task.s0.clone();
                tokens.extend(&response[span.span]);
                VisibleState { tokens, has_summary: true }
            }
            None => visible.extended(&response, &step.observation),
        };
        traj = append_turn(
            traj,
            TurnRecord {
                turn_index: t,
                visible_state: visible.clone(),
                summary_emitted: masks.count(TokenCategory::Summary) > 0,
                rollout_logprobs: vec![-0.5; response.len()],
                response,
                masks,
                observation: step.observation.clone(),
                truncated: false,
            },
        )
        .unwrap();
        traj.task_reward = step.task_reward;
        visible = next;
        if step.done {
            break;
        }
    }
    traj
}

pub fn fixture_task(seed: u64) -> (Vocab, Task) {
    let vocab = Vocab::new(64).unwrap();
    let env = EnvConfig { hops: 3, distractors: 2, padding: 4, max_hops: 8, ..EnvConfig::toy() };
    (vocab, generate_task(&vocab, &env, seed).unwrap())
}
