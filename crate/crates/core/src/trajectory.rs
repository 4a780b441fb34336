//! Turn, trajectory and history data model.
//!
//! A trajectory keeps two views of the same interaction: the per-turn
//! visible states the policy actually conditioned on (compressed after a
//! summary), and the uncompressed full history used by the consistency loss.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    Summary,
    Action,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 2] = [TokenCategory::Summary, TokenCategory::Action];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenCategory::Summary => "summary",
            TokenCategory::Action => "action",
        }
    }
}

/// Partition of a response into summary and action positions.
///
/// Only the summary bits are stored; the action mask is their complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryMask {
    summary: Vec<bool>,
}

impl CategoryMask {
    pub fn all_action(len: usize) -> Self {
        Self { summary: vec![false; len] }
    }

    pub fn from_summary_bits(summary: Vec<bool>) -> Self {
        Self { summary }
    }

    pub fn len(&self) -> usize {
        self.summary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summary.is_empty()
    }

    pub fn summary_mask(&self) -> &[bool] {
        &self.summary
    }

    pub fn action_mask(&self) -> Vec<bool> {
        self.summary.iter().map(|s| !s).collect()
    }

    pub fn category(&self, i: usize) -> TokenCategory {
        if self.summary[i] {
            TokenCategory::Summary
        } else {
            TokenCategory::Action
        }
    }

    pub fn contains(&self, i: usize, c: TokenCategory) -> bool {
        self.category(i) == c
    }

    pub fn count(&self, c: TokenCategory) -> usize {
        let s = self.summary.iter().filter(|&&b| b).count();
        match c {
            TokenCategory::Summary => s,
            TokenCategory::Action => self.summary.len() - s,
        }
    }

    pub fn positions(&self, c: TokenCategory) -> impl Iterator<Item = usize> + '_ {
        (0..self.summary.len()).filter(move |&i| self.contains(i, c))
    }
}

/// Location of the (single) summary block inside a response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummarySpan {
    /// Covers every tag and body token of the block.
    pub span: Range<usize>,
    pub think_body: Option<Range<usize>>,
    pub info_body: Option<Range<usize>>,
}

/// Locates the summary block in `response`, if any.
///
/// Grammar: a `<think_summary>` block, an `<information_summary>` block, or a
/// think block immediately followed by an information block. Tags never nest
/// and a response carries at most one summary block.
pub fn parse_summary(response: &[Token]) -> Result<Option<SummarySpan>> {
    let err = |offset, reason| Err(Error::SummaryParse { offset, reason });
    let mut open: Option<(Token, usize)> = None;
    let mut think: Option<Range<usize>> = None;
    let mut info: Option<Range<usize>> = None;
    let mut block_end: Option<usize> = None;

    for (i, &t) in response.iter().enumerate() {
        match t {
            Token::THINK_OPEN | Token::INFO_OPEN => {
                if open.is_some() {
                    return err(i, "nested summary tag");
                }
                if t == Token::THINK_OPEN && (think.is_some() || info.is_some()) {
                    return err(i, "more than one summary block");
                }
                if t == Token::INFO_OPEN {
                    if info.is_some() {
                        return err(i, "more than one summary block");
                    }
                    if think.is_some() && block_end != Some(i) {
                        return err(i, "information summary detached from think summary");
                    }
                }
                open = Some((t, i));
            }
            Token::THINK_CLOSE | Token::INFO_CLOSE => {
                let expected = if t == Token::THINK_CLOSE { Token::THINK_OPEN } else { Token::INFO_OPEN };
                match open.take() {
                    Some((o, start)) if o == expected => {
                        let body = start + 1..i;
                        if t == Token::THINK_CLOSE {
                            think = Some(body);
                        } else {
                            info = Some(body);
                        }
                        block_end = Some(i + 1);
                    }
                    _ => return err(i, "closing tag without matching opening tag"),
                }
            }
            _ => {}
        }
    }
    if let Some((_, start)) = open {
        return err(start, "unclosed summary tag");
    }
    let start = match (&think, &info) {
        (Some(b), _) => b.start - 1,
        (None, Some(b)) => b.start - 1,
        (None, None) => return Ok(None),
    };
    Ok(Some(SummarySpan { span: start..block_end.unwrap(), think_body: think, info_body: info }))
}

/// Marks the summary block (tags included) as `Summary`, everything else as `Action`.
pub fn build_category_mask(response: &[Token]) -> Result<CategoryMask> {
    let mut bits = vec![false; response.len()];
    if let Some(s) = parse_summary(response)? {
        bits[s.span].iter_mut().for_each(|b| *b = true);
    }
    Ok(CategoryMask { summary: bits })
}

/// Facts asserted by a summary block: each think-body token on its own and the
/// information body read as consecutive (key, value) pairs.
pub fn summary_facts(block: &[Token]) -> Result<Vec<Vec<Token>>> {
    let span = parse_summary(block)?.ok_or(Error::SummaryParse { offset: 0, reason: "no summary block" })?;
    let mut facts: Vec<Vec<Token>> = Vec::new();
    if let Some(b) = span.think_body {
        facts.extend(block[b].iter().map(|&t| vec![t]));
    }
    if let Some(b) = span.info_body {
        facts.extend(block[b].chunks(2).map(|c| c.to_vec()));
    }
    Ok(facts)
}

/// Finds `needle` as a contiguous run inside `haystack`.
pub fn contains_subsequence(haystack: &[Token], needle: &[Token]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleState {
    pub tokens: Vec<Token>,
    pub has_summary: bool,
}

impl VisibleState {
    pub fn initial(s0: &[Token]) -> Self {
        Self { tokens: s0.to_vec(), has_summary: false }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends a turn's response and observation without compressing.
    pub fn extended(&self, response: &[Token], observation: &[Token]) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + response.len() + observation.len());
        tokens.extend_from_slice(&self.tokens);
        tokens.extend_from_slice(response);
        tokens.extend_from_slice(observation);
        Self { tokens, has_summary: self.has_summary }
    }
}

/// Uncompressed interleaving `s0, r_0, o_1, r_1, o_2, ...`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FullHistory {
    tokens: Vec<Token>,
    /// `turn_offsets[t]` is where turn t's response begins, i.e. `|h_{0:t}|`.
    turn_offsets: Vec<usize>,
    observations: Vec<Range<usize>>,
}

impl FullHistory {
    pub fn new(s0: &[Token]) -> Self {
        Self { tokens: s0.to_vec(), turn_offsets: Vec::new(), observations: Vec::new() }
    }

    pub fn from_parts(tokens: Vec<Token>, turn_offsets: Vec<usize>, observations: Vec<Range<usize>>) -> Result<Self> {
        let h = Self { tokens, turn_offsets, observations };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        let bad = |turn, reason: &str| Err(Error::Structure { turn, reason: reason.to_string() });
        if self.observations.len() != self.turn_offsets.len() {
            return bad(0, "observation segments do not match turn count");
        }
        let mut prev = 0usize;
        for (t, (&off, obs)) in self.turn_offsets.iter().zip(&self.observations).enumerate() {
            if (t == 0 && off == 0) || (t > 0 && off <= prev) || off > self.tokens.len() {
                return bad(t, "turn offsets not strictly increasing within bounds");
            }
            if obs.start <= off || obs.end < obs.start || obs.end > self.tokens.len() {
                return bad(t, "observation segment out of bounds");
            }
            if let Some(&next) = self.turn_offsets.get(t + 1) {
                if obs.end != next {
                    return bad(t, "observation does not end at the next turn boundary");
                }
            } else if obs.end != self.tokens.len() {
                return bad(t, "trailing tokens after the last observation");
            }
            prev = off;
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn turn_offsets(&self) -> &[usize] {
        &self.turn_offsets
    }

    pub fn num_turns(&self) -> usize {
        self.turn_offsets.len()
    }

    pub fn observation_ranges(&self) -> &[Range<usize>] {
        &self.observations
    }

    pub fn observations(&self) -> impl Iterator<Item = &[Token]> {
        self.observations.iter().map(|r| &self.tokens[r.clone()])
    }

    /// Tokens of `h_{0:t}`: everything before turn t's response.
    pub fn prefix_tokens(&self, t: usize) -> &[Token] {
        match self.turn_offsets.get(t) {
            Some(&off) => &self.tokens[..off],
            None => &self.tokens,
        }
    }

    /// History truncated to the state at the start of turn t.
    pub fn at_turn(&self, t: usize) -> FullHistory {
        if t >= self.turn_offsets.len() {
            return self.clone();
        }
        FullHistory {
            tokens: self.tokens[..self.turn_offsets[t]].to_vec(),
            turn_offsets: self.turn_offsets[..t].to_vec(),
            observations: self.observations[..t].to_vec(),
        }
    }

    pub fn push_turn(&mut self, response: &[Token], observation: &[Token]) {
        self.turn_offsets.push(self.tokens.len());
        self.tokens.extend_from_slice(response);
        let start = self.tokens.len();
        self.tokens.extend_from_slice(observation);
        self.observations.push(start..self.tokens.len());
    }
}

/// Builds the visible state from the archived history and the latest summary.
///
/// With no summary the full history is returned unchanged; with one, the
/// context becomes `[s0, summary]` and every other history token is dropped.
pub fn reconstruct_visible_state(
    history: &FullHistory,
    latest_summary: Option<&[Token]>,
    s0: &[Token],
) -> Result<VisibleState> {
    if s0.is_empty() {
        return Err(Error::Precondition("s0 must be nonempty".into()));
    }
    let Some(summary) = latest_summary else {
        return Ok(VisibleState { tokens: history.tokens.clone(), has_summary: false });
    };
    let turn = history.num_turns().saturating_sub(1);
    match parse_summary(summary) {
        Ok(Some(s)) if s.span == (0..summary.len()) => {}
        Ok(_) => {
            return Err(Error::Structure { turn, reason: "summary is not a single well-formed block".into() })
        }
        Err(e) => return Err(Error::Structure { turn, reason: e.to_string() }),
    }
    let mut tokens = Vec::with_capacity(s0.len() + summary.len());
    tokens.extend_from_slice(s0);
    tokens.extend_from_slice(summary);
    Ok(VisibleState { tokens, has_summary: true })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub visible_state: VisibleState,
    pub response: Vec<Token>,
    pub masks: CategoryMask,
    /// Per-token log-probabilities under the rollout snapshot.
    pub rollout_logprobs: Vec<f64>,
    pub observation: Vec<Token>,
    pub summary_emitted: bool,
    /// Decode hit `max_response_len` before a stop token.
    pub truncated: bool,
}

impl TurnRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Structure { turn: self.turn_index, reason });
        if self.response.is_empty() {
            return bad("empty response".into());
        }
        if self.masks.len() != self.response.len() {
            return bad("mask length differs from response length".into());
        }
        if self.rollout_logprobs.len() != self.response.len() {
            return bad("log-prob count differs from response length".into());
        }
        if let Some(lp) = self.rollout_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return bad(format!("log-probability {lp} is not <= 0"));
        }
        let expected = build_category_mask(&self.response).map_err(|e| Error::Structure {
            turn: self.turn_index,
            reason: e.to_string(),
        })?;
        if expected != self.masks {
            return bad("masks do not mark exactly the summary block".into());
        }
        let has_block = expected.count(TokenCategory::Summary) > 0;
        if has_block != self.summary_emitted {
            return bad("summary_emitted disagrees with response content".into());
        }
        Ok(())
    }

    /// Tokens of the emitted summary block, if any.
    pub fn summary_block(&self) -> Option<&[Token]> {
        let s = parse_summary(&self.response).ok()??;
        Some(&self.response[s.span])
    }

    /// Response with the summary block removed.
    pub fn action_tokens(&self) -> Vec<Token> {
        self.masks.positions(TokenCategory::Action).map(|i| self.response[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub s0: Vec<Token>,
    pub turns: Vec<TurnRecord>,
    pub full_history: FullHistory,
    pub task_reward: f64,
    pub summary_rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(trajectory_id: impl Into<String>, s0: Vec<Token>) -> Self {
        let full_history = FullHistory::new(&s0);
        Self { trajectory_id: trajectory_id.into(), s0, turns: Vec::new(), full_history, task_reward: 0.0, summary_rewards: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// `h_{0:t}` as a token slice.
    pub fn history_prefix(&self, t: usize) -> &[Token] {
        self.full_history.prefix_tokens(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s0.is_empty() {
            return Err(Error::Structure { turn: 0, reason: "empty s0".into() });
        }
        if !self.full_history.tokens.starts_with(&self.s0) {
            return Err(Error::Structure { turn: 0, reason: "history does not start with s0".into() });
        }
        let mut rebuilt = FullHistory::new(&self.s0);
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i {
                return Err(Error::Ordering { expected: i, got: turn.turn_index });
            }
            turn.validate()?;
            rebuilt.push_turn(&turn.response, &turn.observation);
        }
        if rebuilt != self.full_history {
            return Err(Error::Structure {
                turn: self.turns.len().saturating_sub(1),
                reason: "full history disagrees with the recorded turns".into(),
            });
        }
        if !(self.task_reward == 0.0 || self.task_reward == 1.0) {
            return Err(Error::Structure { turn: 0, reason: format!("task reward {} not in {{0, 1}}", self.task_reward) });
        }
        if !self.summary_rewards.is_empty() && self.summary_rewards.len() != self.turns.len() {
            return Err(Error::Structure { turn: 0, reason: "summary reward count differs from turn count".into() });
        }
        Ok(())
    }
}

/// Appends `turn`, extending the archived history with its response and observation.
pub fn append_turn(mut traj: Trajectory, turn: TurnRecord) -> Result<Trajectory> {
    if turn.turn_index != traj.turns.len() {
        return Err(Error::Ordering { expected: traj.turns.len(), got: turn.turn_index });
    }
    turn.validate()?;
    traj.full_history.push_turn(&turn.response, &turn.observation);
    traj.turns.push(turn);
    debug_assert!(traj.full_history.validate().is_ok());
    Ok(traj)
}
