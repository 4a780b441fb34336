//! Training losses: per-category clipped surrogates over masked tokens, the
//! compressed-versus-full-context consistency term, and their sum.
//!
//! Every loss is recorded as seeded forward passes in a [`LossGraph`], so the
//! exact gradient comes from [`Policy::backward`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{LossGraph, Policy, ScoredResponse};
use crate::rewards::CategoryAdvantages;
use crate::rollout::{response_supports, DecodeSupport};
use crate::trajectory::{CategoryMask, TokenCategory, Trajectory, TurnRecord};
use crate::vocab::{Token, Vocab};

/// Log-ratio sums are clamped to this magnitude before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Log-probability gap on the generated tokens only.
    McGeneratedTokens,
    /// Exact KL over the whole vocabulary at every generated position.
    FullDistribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub lambda_consistency: f64,
    /// `None` disables the consistency term and its full-context passes.
    pub consistency: Option<ConsistencyMode>,
    pub stop_gradient_full_context: bool,
    /// Score responses under the full history instead of the visible state.
    pub train_on_full_history: bool,
    /// Decode grammar the responses were sampled under; `None` scores with the
    /// unrestricted softmax.
    pub support: Option<DecodeSupport>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            lambda_consistency: 1.0,
            consistency: Some(ConsistencyMode::McGeneratedTokens),
            stop_gradient_full_context: false,
            train_on_full_history: false,
            support: Some(DecodeSupport::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRatio {
    pub trajectory: usize,
    pub turn: usize,
    pub category: TokenCategory,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_summary: f64,
    pub l_action: f64,
    pub l_consistency: f64,
    pub l_total: f64,
    pub per_turn_ratios: Vec<TurnRatio>,
    /// Fraction of eligible turns whose clipped branch was active, indexed summary then action.
    pub clip_fraction: [f64; 2],
    pub eligible_turns: [usize; 2],
    /// Set when a category had no eligible turn; its loss is then 0.
    pub empty_category: [bool; 2],
    pub clamp_events: usize,
    pub dilution_fraction: f64,
    pub trained_turns: usize,
    pub trained_tokens: usize,
    pub consistency_turns: usize,
    pub training_forward_tokens: usize,
    pub consistency_forward_tokens: usize,
    pub window_truncations: usize,
}

fn slot(c: TokenCategory) -> usize {
    match c {
        TokenCategory::Summary => 0,
        TokenCategory::Action => 1,
    }
}

/// `Σ_{i in c} (new_i − old_i)`, clamped; the flag reports a clamp.
pub fn masked_log_ratio(new: &[f64], old: &[f64], mask: &CategoryMask, c: TokenCategory) -> (f64, bool) {
    let s: f64 = mask.positions(c).map(|i| new[i] - old[i]).sum();
    let clamped = s.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    (clamped, clamped != s)
}

/// Allowed sets the turn's response was sampled from, replayed from its visible state.
pub fn turn_supports(policy: &Policy, turn: &TurnRecord, support: Option<&DecodeSupport>) -> Result<Option<Vec<Vec<Token>>>> {
    support
        .map(|s| {
            let vocab = Vocab::new(policy.arch().vocab_size)?;
            response_supports(&vocab, &turn.visible_state.tokens, &turn.response, s)
        })
        .transpose()
}

/// Scores `response` after `context`, renormalised over `supports` when given.
pub fn score_response(
    policy: &Policy,
    context: &[Token],
    response: &[Token],
    supports: Option<&Vec<Vec<Token>>>,
) -> Result<ScoredResponse> {
    match supports {
        Some(s) => ScoredResponse::score_restricted(policy, context, response, s.clone()),
        None => ScoredResponse::score(policy, context, response),
    }
}

/// Sequence-level ratio of one category's tokens between two policies, both
/// conditioned on the turn's visible state. `None` when the turn has no such tokens.
pub fn category_ratio(
    policy: &Policy,
    policy_old: &Policy,
    turn: &TurnRecord,
    c: TokenCategory,
    support: Option<&DecodeSupport>,
) -> Result<Option<f64>> {
    if turn.masks.count(c) == 0 {
        return Ok(None);
    }
    let ctx = &turn.visible_state.tokens;
    let supports = turn_supports(policy, turn, support)?;
    let new = score_response(policy, ctx, &turn.response, supports.as_ref())?.logprobs;
    let old = score_response(policy_old, ctx, &turn.response, supports.as_ref())?.logprobs;
    Ok(Some(masked_log_ratio(&new, &old, &turn.masks, c).0.exp()))
}

/// PPO-clip objective for one turn: value, derivative in ρ, and whether the
/// clipped branch was taken.
pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, adv, false)
    }
}

/// Summary tokens as a fraction of all generated tokens.
pub fn dilution_fraction(batch: &[Trajectory]) -> f64 {
    let (s, n) = batch.iter().flat_map(|t| &t.turns).fold((0usize, 0usize), |(s, n), turn| {
        (s + turn.masks.count(TokenCategory::Summary), n + turn.response.len())
    });
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

#[derive(Default)]
struct Partial {
    items: Vec<ScoredResponse>,
    b: LossBreakdown,
    clipped: [usize; 2],
    summary_tokens: usize,
}

/// Total loss `L_summary + L_action + λ·L_consistency` over the selected turns.
///
/// Surrogates average over a trajectory's eligible selected turns, then over
/// trajectories with at least one eligible turn. The consistency term averages
/// over each trajectory's selected turns, then over trajectories; turns whose
/// visible state equals the full history contribute exactly 0 without a pass.
pub fn total_loss(
    policy: &Policy,
    batch: &[Trajectory],
    selected: &[Vec<usize>],
    adv: &CategoryAdvantages,
    cfg: &LossConfig,
) -> Result<(LossGraph, LossBreakdown)> {
    if selected.len() != batch.len() {
        return Err(Error::Precondition("one turn selection per trajectory is required".into()));
    }
    if !(cfg.clip_eps > 0.0 && cfg.clip_eps < 1.0) {
        return Err(Error::Precondition(format!("clip_eps {} outside (0, 1)", cfg.clip_eps)));
    }
    let eligible = |ti: usize, c: TokenCategory| -> usize {
        selected[ti]
            .iter()
            .filter(|&&t| batch[ti].turns[t].masks.count(c) > 0 && adv.get(ti, t, c).is_some())
            .count()
    };
    let mut n_traj = [0usize; 2];
    for ti in 0..batch.len() {
        for c in TokenCategory::ALL {
            n_traj[slot(c)] += usize::from(eligible(ti, c) > 0);
        }
    }
    let n_cons = selected.iter().filter(|s| !s.is_empty()).count();
    let consistency = if cfg.train_on_full_history { None } else { cfg.consistency };

    let partials: Vec<Result<Partial>> = (0..batch.len())
        .into_par_iter()
        .map(|ti| {
            let traj = &batch[ti];
            let mut p = Partial::default();
            let counts = [eligible(ti, TokenCategory::Summary), eligible(ti, TokenCategory::Action)];
            for &t in &selected[ti] {
                let turn = traj
                    .turns
                    .get(t)
                    .ok_or_else(|| Error::Precondition(format!("selected turn {t} beyond trajectory {ti}")))?;
                let history = traj.history_prefix(t);
                let ctx = if cfg.train_on_full_history { history } else { &turn.visible_state.tokens[..] };
                let supports = turn_supports(policy, turn, cfg.support.as_ref())?;
                let mut scored = score_response(policy, ctx, &turn.response, supports.as_ref())?;
                p.b.trained_turns += 1;
                p.b.trained_tokens += turn.response.len();
                p.summary_tokens += turn.masks.count(TokenCategory::Summary);
                p.b.training_forward_tokens += scored.forward_tokens;
                p.b.window_truncations += scored.truncated_positions;

                for c in TokenCategory::ALL {
                    let Some(a) = adv.get(ti, t, c) else { continue };
                    if turn.masks.count(c) == 0 {
                        continue;
                    }
                    let (lr, clamped) = masked_log_ratio(&scored.logprobs, &turn.rollout_logprobs, &turn.masks, c);
                    let rho = lr.exp();
                    let (s, ds, clip) = clipped_surrogate(rho, a, cfg.clip_eps);
                    let w = 1.0 / (counts[slot(c)] * n_traj[slot(c)]) as f64;
                    let loss = -w * s;
                    match c {
                        TokenCategory::Summary => p.b.l_summary += loss,
                        TokenCategory::Action => p.b.l_action += loss,
                    }
                    p.b.per_turn_ratios.push(TurnRatio { trajectory: ti, turn: t, category: c, ratio: rho });
                    p.clipped[slot(c)] += usize::from(clip);
                    p.b.clamp_events += usize::from(clamped);
                    if !clamped && ds != 0.0 {
                        for i in turn.masks.positions(c) {
                            scored.seed_logprob(i, -w * ds * rho);
                        }
                    }
                }

                if let Some(mode) = consistency {
                    if turn.visible_state.tokens[..] != *history {
                        let mut full = score_response(policy, history, &turn.response, supports.as_ref())?;
                        p.b.consistency_turns += 1;
                        p.b.consistency_forward_tokens += full.forward_tokens;
                        p.b.window_truncations += full.truncated_positions;
                        let avg = 1.0 / (selected[ti].len() * n_cons) as f64;
                        let wc = cfg.lambda_consistency * avg;
                        let value = consistency_term(&mut scored, &mut full, mode, wc, cfg.stop_gradient_full_context);
                        p.b.l_consistency += avg * value;
                        if full.has_seeds() {
                            p.items.push(full);
                        }
                    }
                }
                p.items.push(scored);
            }
            Ok(p)
        })
        .collect();

    let mut graph = LossGraph::new();
    let mut b = LossBreakdown::default();
    let mut clipped = [0usize; 2];
    let mut summary_tokens = 0;
    for part in partials {
        let part = part?;
        for item in part.items {
            graph.push(item);
        }
        let q = part.b;
        b.l_summary += q.l_summary;
        b.l_action += q.l_action;
        b.l_consistency += q.l_consistency;
        b.per_turn_ratios.extend(q.per_turn_ratios);
        b.clamp_events += q.clamp_events;
        b.trained_turns += q.trained_turns;
        b.trained_tokens += q.trained_tokens;
        b.consistency_turns += q.consistency_turns;
        b.training_forward_tokens += q.training_forward_tokens;
        b.consistency_forward_tokens += q.consistency_forward_tokens;
        b.window_truncations += q.window_truncations;
        clipped[0] += part.clipped[0];
        clipped[1] += part.clipped[1];
        summary_tokens += part.summary_tokens;
    }
    for c in TokenCategory::ALL {
        let k = slot(c);
        b.eligible_turns[k] = b.per_turn_ratios.iter().filter(|r| r.category == c).count();
        b.empty_category[k] = b.eligible_turns[k] == 0;
        b.clip_fraction[k] = if b.eligible_turns[k] == 0 { 0.0 } else { clipped[k] as f64 / b.eligible_turns[k] as f64 };
    }
    b.dilution_fraction = if b.trained_tokens == 0 { 0.0 } else { summary_tokens as f64 / b.trained_tokens as f64 };
    b.l_total = b.l_summary + b.l_action + cfg.lambda_consistency * b.l_consistency;
    graph.value = b.l_total;
    Ok((graph, b))
}

/// Per-turn consistency value of `response` between the compressed and full
/// contexts, as used by [`total_loss`], without recording gradients.
pub fn consistency_value(
    policy: &Policy,
    visible: &[Token],
    history: &[Token],
    response: &[Token],
    mode: ConsistencyMode,
    supports: Option<&Vec<Vec<Token>>>,
) -> Result<f64> {
    let mut s = score_response(policy, visible, response, supports)?;
    let mut h = score_response(policy, history, response, supports)?;
    Ok(consistency_term(&mut s, &mut h, mode, 0.0, true))
}

/// Adds the weighted consistency gradient to both passes and returns the
/// unweighted per-turn value.
fn consistency_term(s: &mut ScoredResponse, h: &mut ScoredResponse, mode: ConsistencyMode, w: f64, stop_h: bool) -> f64 {
    let n = s.len();
    match mode {
        ConsistencyMode::McGeneratedTokens => {
            let mut v = 0.0;
            for i in 0..n {
                v += s.logprobs[i] - h.logprobs[i];
                s.seed_logprob(i, w);
                if !stop_h {
                    h.seed_logprob(i, -w);
                }
            }
            v
        }
        ConsistencyMode::FullDistribution => {
            let mut v = 0.0;
            for i in 0..n {
                let ls = s.log_distribution(i);
                let lh = h.log_distribution(i);
                let kl = kl_divergence(&ls, &lh);
                v += kl;
                let gs: Vec<f64> = ls
                    .iter()
                    .zip(&lh)
                    .map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { w * a.exp() * (a - b - kl) })
                    .collect();
                s.seed_logits(i, &gs);
                if !stop_h {
                    let gh: Vec<f64> = ls.iter().zip(&lh).map(|(a, b)| w * (b.exp() - a.exp())).collect();
                    h.seed_logits(i, &gh);
                }
            }
            v
        }
    }
}

/// `KL(p ‖ q)` from log-probabilities.
pub fn kl_divergence(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::rewards::{assign_summary_rewards, compute_advantages, AdvantageConfig};
    use crate::rollout::{run_batch, RolloutConfig};
    use crate::testutil::{central_difference, grad_arch, rel_err};
    use crate::trajectory::build_category_mask;

    fn batch(policy: &Policy, n: usize, fold: Option<usize>) -> Vec<Trajectory> {
        let vocab = Vocab::new(policy.arch().vocab_size).unwrap();
        let env = EnvConfig { hops: 2, distractors: 2, padding: 2, max_hops: 8, ..EnvConfig::toy() };
        let cfg = RolloutConfig { fold_trigger_len: fold, max_turns: Some(4), ..Default::default() };
        let seeds: Vec<u64> = (0..n as u64).collect();
        let mut out = run_batch(policy, &vocab, &env, &seeds, &cfg).into_trajectories().unwrap();
        for t in &mut out {
            assign_summary_rewards(t).unwrap();
        }
        out
    }

    fn all_turns(b: &[Trajectory]) -> Vec<Vec<usize>> {
        b.iter().map(|t| (0..t.len()).collect()).collect()
    }

    #[test]
    fn identical_policies_give_unit_ratios() {
        let mut p = Policy::init(grad_arch(), 0.3, 1).unwrap();
        let old = p.snapshot();
        for traj in batch(&old, 4, Some(8)) {
            for turn in &traj.turns {
                for c in TokenCategory::ALL {
                    if let Some(r) = category_ratio(&p, &old, turn, c, Some(&DecodeSupport::default())).unwrap() {
                        assert_eq!(r, 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn category_ratios_multiply_to_the_sequence_ratio() {
        let p = Policy::init(grad_arch(), 0.3, 1).unwrap();
        let mut q = p.clone();
        q.params_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * ((i % 7) as f64 - 3.0));
        for traj in batch(&p, 4, Some(8)) {
            for turn in traj.turns.iter().filter(|t| t.summary_emitted) {
                for support in [None, Some(DecodeSupport::default())] {
                    let rs = category_ratio(&q, &p, turn, TokenCategory::Summary, support.as_ref()).unwrap().unwrap();
                    let ra = category_ratio(&q, &p, turn, TokenCategory::Action, support.as_ref()).unwrap().unwrap();
                    let ctx = &turn.visible_state.tokens;
                    let sup = turn_supports(&p, turn, support.as_ref()).unwrap();
                    let new: f64 = score_response(&q, ctx, &turn.response, sup.as_ref()).unwrap().logprobs.iter().sum();
                    let old: f64 = score_response(&p, ctx, &turn.response, sup.as_ref()).unwrap().logprobs.iter().sum();
                    assert!((rs * ra - (new - old).exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_token_ratio_arithmetic() {
        let mask = CategoryMask::all_action(2);
        let (lr, clamped) = masked_log_ratio(&[-1.0, -2.0], &[-1.1, -1.7], &mask, TokenCategory::Action);
        assert!(!clamped);
        assert!((lr.exp() - (-0.2f64).exp()).abs() < 1e-12);
        let (lr, clamped) = masked_log_ratio(&[0.0], &[-50.0], &CategoryMask::all_action(1), TokenCategory::Action);
        assert!(clamped && lr == LOG_RATIO_CLAMP);
    }

    #[test]
    fn clip_arithmetic() {
        let (v, d, active) = clipped_surrogate(1.5, 1.0, 0.2);
        assert!((v - 1.2).abs() < 1e-15 && d == 0.0 && active);
        let (v, d, active) = clipped_surrogate(1.1, 1.0, 0.2);
        assert!(v == 1.1 && d == 1.0 && !active);
        // Negative advantage clips from below.
        let (v, d, active) = clipped_surrogate(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-15 && d == 0.0 && active);
    }

    #[test]
    fn zero_advantages_give_zero_loss_and_gradient() {
        let p = Policy::init(grad_arch(), 0.3, 2).unwrap();
        let b = batch(&p, 3, Some(8));
        let mut adv = compute_advantages(&b, &AdvantageConfig::default()).unwrap();
        adv.set_category(TokenCategory::Summary, 0.0);
        adv.set_category(TokenCategory::Action, 0.0);
        let cfg = LossConfig { consistency: None, ..Default::default() };
        let (g, br) = total_loss(&p, &b, &all_turns(&b), &adv, &cfg).unwrap();
        assert_eq!(br.l_total, 0.0);
        assert!(p.backward(&g).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn summary_free_trajectories_have_zero_consistency() {
        let p = Policy::init(grad_arch(), 0.3, 3).unwrap();
        let b = batch(&p, 4, None);
        let adv = compute_advantages(&b, &AdvantageConfig::default()).unwrap();
        for mode in [ConsistencyMode::McGeneratedTokens, ConsistencyMode::FullDistribution] {
            let cfg = LossConfig { consistency: Some(mode), ..Default::default() };
            let (_, br) = total_loss(&p, &b, &all_turns(&b), &adv, &cfg).unwrap();
            assert_eq!(br.l_consistency, 0.0);
            assert_eq!(br.consistency_forward_tokens, 0);
        }
    }

    #[test]
    fn full_distribution_kl_is_nonnegative() {
        let p = Policy::init(grad_arch(), 0.5, 4).unwrap();
        for traj in batch(&p, 6, Some(8)) {
            for (t, turn) in traj.turns.iter().enumerate() {
                let s = ScoredResponse::score(&p, &turn.visible_state.tokens, &turn.response).unwrap();
                let h = ScoredResponse::score(&p, traj.history_prefix(t), &turn.response).unwrap();
                for i in 0..turn.response.len() {
                    assert!(kl_divergence(&s.log_distribution(i), &h.log_distribution(i)) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn composition_and_breakdown_identity() {
        let p = Policy::init(grad_arch(), 0.3, 5).unwrap();
        let b = batch(&p, 4, Some(8));
        let adv = compute_advantages(&b, &AdvantageConfig::default()).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let cfg = LossConfig { lambda_consistency: lambda, ..Default::default() };
            let (g, br) = total_loss(&p, &b, &all_turns(&b), &adv, &cfg).unwrap();
            assert!((br.l_total - (br.l_summary + br.l_action + lambda * br.l_consistency)).abs() < 1e-12);
            assert_eq!(g.value, br.l_total);
            assert!(br.per_turn_ratios.iter().all(|r| r.ratio > 0.0));
        }
        let plain = batch(&p, 4, None);
        let adv = compute_advantages(&plain, &AdvantageConfig::default()).unwrap();
        let cfg = LossConfig { lambda_consistency: 0.0, ..Default::default() };
        let (_, br) = total_loss(&p, &plain, &all_turns(&plain), &adv, &cfg).unwrap();
        assert_eq!(br.l_total, br.l_action);
        assert!(br.empty_category[0]);
    }

    #[test]
    fn dilution_arithmetic() {
        let s0 = vec![Token::QUESTION, Token(14), Token::ASK];
        let mut traj = Trajectory::new("d", s0.clone());
        let responses = [
            vec![Token::THINK_OPEN, Token(14), Token::THINK_CLOSE, Token::SEARCH, Token(14), Token::END],
            vec![Token::SEARCH, Token(15), Token::END, Token::END, Token::END, Token::END],
        ];
        for (t, r) in responses.into_iter().enumerate() {
            let masks = build_category_mask(&r).unwrap();
            traj = crate::trajectory::append_turn(
                traj,
                TurnRecord {
                    turn_index: t,
                    visible_state: crate::trajectory::VisibleState::initial(&s0),
                    summary_emitted: masks.count(TokenCategory::Summary) > 0,
                    rollout_logprobs: vec![-1.0; r.len()],
                    response: r,
                    masks,
                    observation: vec![Token::NO_RESULT],
                    truncated: false,
                },
            )
            .unwrap();
        }
        assert_eq!(dilution_fraction(&[traj]), 0.25);
        assert_eq!(dilution_fraction(&[]), 0.0);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let p = Policy::init(grad_arch(), 0.2, 6).unwrap();
        let b = batch(&p, 2, Some(8));
        let mut adv = compute_advantages(&b, &AdvantageConfig::default()).unwrap();
        // Fixed nonzero advantages so both surrogates carry gradient.
        for (i, e) in adv.entries.iter_mut().enumerate() {
            e.advantage = [0.9, -0.6, 0.4, -1.1][i % 4];
        }
        let sel = all_turns(&b);
        // Move off the rollout point so ratios differ from 1.
        let mut q = p.clone();
        q.params_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.003 * ((i % 5) as f64 - 2.0));
        for mode in [ConsistencyMode::McGeneratedTokens, ConsistencyMode::FullDistribution] {
            let cfg = LossConfig { consistency: Some(mode), ..Default::default() };
            let (g, br) = total_loss(&q, &b, &sel, &adv, &cfg).unwrap();
            assert!(br.eligible_turns[0] > 0 && br.eligible_turns[1] > 0 && br.consistency_turns > 0);
            let analytic = q.backward(&g).unwrap();
            let numeric = central_difference(&q, 1e-4, |r| total_loss(r, &b, &sel, &adv, &cfg).unwrap().1.l_total);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(rel_err(*a, *n) < 1e-4, "{mode:?} param {i}: analytic {a} numeric {n}");
            }
        }
    }
}
