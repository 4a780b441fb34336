//! The act-observe loop with context folding.
//!
//! Each turn decodes a response from the visible state. When the visible
//! state has grown past `fold_trigger_len`, the response is forced to open a
//! summary block, and the next turn's context is rebuilt as `[s0, summary]`.
//! Decoding follows the action grammar: a token outside the grammar at the
//! current position is never sampled, but the stored log-probability is the
//! one under the policy's full softmax, so it can be recomputed exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{generate_task, Env, EnvConfig, Task};
use crate::error::{Error, Result};
use crate::policy::{sample_restricted, Decoder, Policy};
use crate::seed::{derive, stream};
use crate::trajectory::{
    append_turn, build_category_mask, reconstruct_visible_state, Trajectory, TurnRecord, VisibleState,
};
use crate::vocab::{Token, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Fold when the visible state is longer than this at turn start; `None`
    /// (written `"never"`) disables folding.
    #[serde(with = "fold_trigger")]
    pub fold_trigger_len: Option<usize>,
    /// Overrides the environment's turn cap.
    pub max_turns: Option<usize>,
    pub max_response_len: usize,
    /// Cap on each summary body, in tokens.
    pub max_summary_body: usize,
    /// Only entities already present in the context may be searched, answered or summarised.
    pub restrict_args_to_context: bool,
    pub seed: u64,
}

mod fold_trigger {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Len(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => Repr::Len(*l),
            None => Repr::Word("never".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Len(l) => Ok(Some(l)),
            Repr::Word(w) if w == "never" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a length or \"never\", got \"{w}\""))),
        }
    }
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            fold_trigger_len: Some(64),
            max_turns: None,
            max_response_len: 24,
            max_summary_body: 4,
            restrict_args_to_context: true,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if let Some(l) = self.fold_trigger_len {
            if l >= window {
                return Err(Error::Config {
                    key: "rollout.fold_trigger_len".into(),
                    reason: format!("must be below the policy window {window}"),
                });
            }
        }
        if self.max_response_len == 0 {
            return Err(Error::Config { key: "rollout.max_response_len".into(), reason: "must be positive".into() });
        }
        if self.max_turns == Some(0) {
            return Err(Error::Config { key: "rollout.max_turns".into(), reason: "must be positive".into() });
        }
        Ok(())
    }

    /// Longest possible visible state right after a fold.
    pub fn folded_state_bound(&self, s0_len: usize) -> usize {
        s0_len + 2 * self.max_summary_body + 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    ThinkOpen,
    ThinkBody(usize),
    AfterThink,
    InfoBody(usize),
    Verb,
    SearchArg,
    AnswerArg,
    End,
}

/// Tracks which entity tokens the context has mentioned so far.
#[derive(Clone)]
struct Seen {
    keys: Vec<Token>,
    values: Vec<Token>,
    marked: Vec<bool>,
}

impl Seen {
    fn new(vocab: &Vocab, context: &[Token], restrict: bool) -> Self {
        let mut s = Self { keys: Vec::new(), values: Vec::new(), marked: vec![false; vocab.size()] };
        if restrict {
            for &t in context {
                s.mark(vocab, t);
            }
        } else {
            for i in vocab.keys().chain(vocab.values()) {
                s.mark(vocab, Token(i as u16));
            }
        }
        s
    }

    fn mark(&mut self, vocab: &Vocab, t: Token) {
        if t.id() < self.marked.len() && !self.marked[t.id()] && vocab.is_entity(t) {
            self.marked[t.id()] = true;
            if vocab.is_key(t) {
                self.keys.push(t);
            } else {
                self.values.push(t);
            }
        }
    }
}

/// Decoding constraints that shape the sampled distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSupport {
    pub restrict_args_to_context: bool,
    pub max_summary_body: usize,
}

impl Default for DecodeSupport {
    fn default() -> Self {
        RolloutConfig::default().support()
    }
}

impl RolloutConfig {
    pub fn support(&self) -> DecodeSupport {
        DecodeSupport { restrict_args_to_context: self.restrict_args_to_context, max_summary_body: self.max_summary_body }
    }
}

/// The response grammar as a state machine over allowed next tokens.
struct Grammar {
    vocab: Vocab,
    seen: Seen,
    phase: Phase,
    body_cap: usize,
    finished: bool,
}

impl Grammar {
    fn new(vocab: &Vocab, context: &[Token], fold: bool, support: &DecodeSupport) -> Self {
        Self {
            vocab: *vocab,
            seen: Seen::new(vocab, context, support.restrict_args_to_context),
            phase: if fold { Phase::ThinkOpen } else { Phase::Verb },
            body_cap: support.max_summary_body,
            finished: false,
        }
    }

    /// Tokens allowed next, in a fixed order.
    fn allowed(&self, out: &mut Vec<Token>) {
        out.clear();
        let seen = &self.seen;
        let verbs = |a: &mut Vec<Token>| {
            if !seen.keys.is_empty() {
                a.push(Token::SEARCH);
            }
            if !seen.values.is_empty() {
                a.push(Token::ANSWER);
            }
        };
        match self.phase {
            Phase::ThinkOpen => out.push(Token::THINK_OPEN),
            Phase::ThinkBody(n) | Phase::InfoBody(n) => {
                if n < self.body_cap {
                    out.extend(seen.keys.iter().chain(&seen.values));
                }
                out.push(if matches!(self.phase, Phase::ThinkBody(_)) { Token::THINK_CLOSE } else { Token::INFO_CLOSE });
            }
            Phase::AfterThink => {
                out.push(Token::INFO_OPEN);
                verbs(out);
            }
            Phase::Verb => verbs(out),
            Phase::SearchArg => out.extend(&seen.keys),
            Phase::AnswerArg => out.extend(&seen.values),
            Phase::End => out.push(Token::END),
        }
        if out.is_empty() {
            // Only reachable with an empty context entity set; the action comes out malformed.
            out.push(Token::END);
        }
    }

    fn advance(&mut self, tok: Token) -> Result<()> {
        self.seen.mark(&self.vocab, tok);
        self.phase = match (self.phase, tok) {
            (Phase::ThinkOpen, _) => Phase::ThinkBody(0),
            (Phase::ThinkBody(_), Token::THINK_CLOSE) => Phase::AfterThink,
            (Phase::ThinkBody(n), _) => Phase::ThinkBody(n + 1),
            (Phase::AfterThink, Token::INFO_OPEN) => Phase::InfoBody(0),
            (Phase::InfoBody(_), Token::INFO_CLOSE) => Phase::Verb,
            (Phase::InfoBody(n), _) => Phase::InfoBody(n + 1),
            (Phase::AfterThink | Phase::Verb, Token::SEARCH) => Phase::SearchArg,
            (Phase::AfterThink | Phase::Verb, Token::ANSWER) => Phase::AnswerArg,
            (Phase::SearchArg | Phase::AnswerArg, _) => Phase::End,
            (_, Token::END) => {
                self.finished = true;
                Phase::End
            }
            (p, t) => return Err(Error::Contract(format!("decoder produced {t} in phase {p:?}"))),
        };
        Ok(())
    }
}

/// One decoded turn.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub response: Vec<Token>,
    /// Log-probabilities under the grammar-restricted distribution.
    pub logprobs: Vec<f64>,
    pub truncated: bool,
    pub forward_tokens: usize,
    pub window_truncations: usize,
}

/// Samples one grammar-conforming response after `context`.
pub fn decode_turn(
    policy: &Policy,
    vocab: &Vocab,
    context: &[Token],
    fold: bool,
    cfg: &RolloutConfig,
    rng_seed: u64,
) -> Result<Decoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut dec = Decoder::new(policy, context)?;
    let mut grammar = Grammar::new(vocab, context, fold, &cfg.support());
    let (mut response, mut logprobs) = (Vec::new(), Vec::new());
    let mut allowed = Vec::new();
    while !grammar.finished && response.len() < cfg.max_response_len {
        grammar.allowed(&mut allowed);
        let logits = dec.next_logits()?;
        let (tok, lp) = sample_restricted(&logits, &allowed, &mut rng);
        dec.push(tok);
        response.push(tok);
        logprobs.push(lp);
        grammar.advance(tok)?;
    }
    Ok(Decoded {
        truncated: !grammar.finished,
        response,
        logprobs,
        forward_tokens: dec.forward_tokens(),
        window_truncations: dec.truncations(),
    })
}

/// Replays the grammar over a decoded response, returning the allowed set at
/// every position; a response that opens with a think tag was a fold turn.
pub fn response_supports(vocab: &Vocab, context: &[Token], response: &[Token], support: &DecodeSupport) -> Result<Vec<Vec<Token>>> {
    let fold = response.first() == Some(&Token::THINK_OPEN);
    let mut grammar = Grammar::new(vocab, context, fold, support);
    let mut out = Vec::with_capacity(response.len());
    for (i, &tok) in response.iter().enumerate() {
        let mut allowed = Vec::new();
        grammar.allowed(&mut allowed);
        if grammar.finished || !allowed.contains(&tok) {
            return Err(Error::Structure { turn: 0, reason: format!("response token {i} ({tok}) is outside the decode grammar") });
        }
        grammar.advance(tok)?;
        out.push(allowed);
    }
    Ok(out)
}

/// Per-episode counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episodes: usize,
    pub successes: usize,
    pub turns: usize,
    pub summaries: usize,
    pub response_tokens: usize,
    pub truncated_turns: usize,
    pub forward_tokens: usize,
    pub window_truncations: usize,
}

impl EpisodeMetrics {
    pub fn merge(mut self, o: &EpisodeMetrics) -> Self {
        self.episodes += o.episodes;
        self.successes += o.successes;
        self.turns += o.turns;
        self.summaries += o.summaries;
        self.response_tokens += o.response_tokens;
        self.truncated_turns += o.truncated_turns;
        self.forward_tokens += o.forward_tokens;
        self.window_truncations += o.window_truncations;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub metrics: EpisodeMetrics,
}

/// Runs one task to completion under a frozen policy.
pub fn run_episode(policy_old: &Policy, vocab: &Vocab, task: &Task, cfg: &RolloutConfig) -> Result<Episode> {
    cfg.validate(policy_old.arch().window)?;
    let max_turns = cfg.max_turns.unwrap_or(2 * task.chain.hops() + 4);
    let mut env = Env::new(*vocab, task.clone(), max_turns);
    let mut traj = Trajectory::new(format!("task-{:016x}", task.seed), task.s0.clone());
    let mut visible = VisibleState::initial(&task.s0);
    let mut m = EpisodeMetrics { episodes: 1, ..Default::default() };
    for t in 0.. {
        let fold = t >= 1 && cfg.fold_trigger_len.is_some_and(|l| visible.len() > l);
        let seed = derive(&[stream::SAMPLE, cfg.seed, task.seed, t as u64]);
        let d = decode_turn(policy_old, vocab, &visible.tokens, fold, cfg, seed)?;
        let masks = build_category_mask(&d.response)?;
        let action: Vec<Token> = masks.positions(crate::trajectory::TokenCategory::Action).map(|i| d.response[i]).collect();
        let step = env.step(&action)?;
        let turn = TurnRecord {
            turn_index: t,
            visible_state: visible.clone(),
            summary_emitted: masks.count(crate::trajectory::TokenCategory::Summary) > 0,
            response: d.response,
            masks,
            rollout_logprobs: d.logprobs,
            observation: step.observation,
            truncated: d.truncated,
        };
        m.turns += 1;
        m.summaries += usize::from(turn.summary_emitted);
        m.response_tokens += turn.response.len();
        m.truncated_turns += usize::from(turn.truncated);
        m.forward_tokens += d.forward_tokens;
        m.window_truncations += d.window_truncations;
        traj = append_turn(traj, turn)?;
        let last = traj.turns.last().unwrap();
        visible = match last.summary_block() {
            Some(block) => reconstruct_visible_state(&traj.full_history, Some(block), &traj.s0)?,
            None => visible.extended(&last.response, &last.observation),
        };
        if step.done {
            traj.task_reward = step.task_reward;
            break;
        }
    }
    m.successes = usize::from(traj.task_reward == 1.0);
    Ok(Episode { trajectory: traj, metrics: m })
}

#[derive(Debug)]
pub struct BatchOutput {
    /// One slot per input seed, in input order.
    pub results: Vec<Result<Episode>>,
    pub metrics: EpisodeMetrics,
    pub errors: usize,
}

impl BatchOutput {
    /// Successful trajectories in seed order, or the first episode error.
    pub fn into_trajectories(self) -> Result<Vec<Trajectory>> {
        self.results.into_iter().map(|r| r.map(|e| e.trajectory)).collect()
    }
}

/// Runs the given tasks in parallel; output order follows input order.
pub fn run_tasks(policy_old: &Policy, vocab: &Vocab, tasks: &[Task], cfg: &RolloutConfig) -> BatchOutput {
    let results: Vec<Result<Episode>> = tasks.par_iter().map(|t| run_episode(policy_old, vocab, t, cfg)).collect();
    let metrics = results.iter().filter_map(|r| r.as_ref().ok()).fold(EpisodeMetrics::default(), |a, e| a.merge(&e.metrics));
    let errors = results.iter().filter(|r| r.is_err()).count();
    BatchOutput { results, metrics, errors }
}

/// Generates one task per seed and runs them.
pub fn run_batch(policy_old: &Policy, vocab: &Vocab, env: &EnvConfig, task_seeds: &[u64], cfg: &RolloutConfig) -> BatchOutput {
    let tasks: Vec<Result<Task>> = task_seeds.iter().map(|&s| generate_task(vocab, env, s)).collect();
    let ok: Vec<Task> = tasks.iter().filter_map(|t| t.as_ref().ok().cloned()).collect();
    let mut ran = run_tasks(policy_old, vocab, &ok, cfg).results.into_iter();
    let results: Vec<Result<Episode>> = tasks.into_iter().map(|t| t.and_then(|_| ran.next().unwrap())).collect();
    let metrics = results.iter().filter_map(|r| r.as_ref().ok()).fold(EpisodeMetrics::default(), |a, e| a.merge(&e.metrics));
    let errors = results.iter().filter(|r| r.is_err()).count();
    BatchOutput { results, metrics, errors }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionStats {
    pub avg_visible_len_per_turn: f64,
    pub compression_ratio: f64,
    pub visible_tokens: usize,
    pub history_tokens: usize,
}

/// Visible-context size against the uncompressed history, summed over turns.
pub fn compression_stats(traj: &Trajectory) -> Result<CompressionStats> {
    if traj.turns.is_empty() {
        return Err(Error::Precondition("trajectory has no turns".into()));
    }
    let visible: usize = traj.turns.iter().map(|t| t.visible_state.len()).sum();
    let history: usize = (0..traj.turns.len()).map(|t| traj.history_prefix(t).len()).sum();
    Ok(CompressionStats {
        avg_visible_len_per_turn: visible as f64 / traj.turns.len() as f64,
        compression_ratio: visible as f64 / history as f64,
        visible_tokens: visible,
        history_tokens: history,
    })
}

/// Trajectory-length buckets: 1–5, 6–10 and more than 10 turns.
pub const BUCKETS: [&str; 3] = ["1-5", "5-10", "10+"];

pub fn length_bucket(turns: usize) -> usize {
    match turns {
        0..=5 => 0,
        6..=10 => 1,
        _ => 2,
    }
}
