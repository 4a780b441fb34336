//! Synthetic multi-hop retrieval environment.
//!
//! A task is a chain of keys: searching `keys[i]` reveals `values[i]`, which is
//! the next key, until the last hop reveals the answer token. Distractor keys
//! return plausible but wrong values, and every successful search is padded
//! with filler noise and distractor mentions so that histories grow quickly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{contains_subsequence, FullHistory};
use crate::vocab::{Token, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub hops: usize,
    pub distractors: usize,
    /// Noise tokens appended to every successful search result.
    pub padding: usize,
    pub max_hops: usize,
    /// Turns allowed beyond the `hops` searches and the answer.
    pub spare_turns: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EnvConfig {
    /// The default learning task.
    pub fn toy() -> Self {
        Self { hops: 3, distractors: 0, padding: 8, max_hops: 8, spare_turns: 1 }
    }

    /// Longer chains with heavy observation padding.
    pub fn web_like() -> Self {
        Self { hops: 6, distractors: 6, padding: 40, max_hops: 8, spare_turns: 9 }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.hops < 2 {
            return Err(Error::Precondition(format!("hops must be at least 2, got {}", self.hops)));
        }
        if self.hops > self.max_hops {
            return Err(Error::Precondition(format!("hops {} exceed max_hops {}", self.hops, self.max_hops)));
        }
        if !vocab.supports_env() {
            return Err(Error::Capacity(format!("vocabulary of size {} cannot host the environment", vocab.size())));
        }
        if self.hops + self.distractors > vocab.keys().len() {
            return Err(Error::Capacity(format!(
                "{} chain keys plus {} distractors exceed {} key tokens",
                self.hops,
                self.distractors,
                vocab.keys().len()
            )));
        }
        Ok(())
    }

    /// Turn cap after which an episode ends with reward 0.
    pub fn max_turns(&self) -> usize {
        self.hops + 1 + self.spare_turns
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactChain {
    pub keys: Vec<Token>,
    /// `values[i]` is `keys[i + 1]`, except the last entry which is the answer.
    pub values: Vec<Token>,
}

impl FactChain {
    pub fn hops(&self) -> usize {
        self.keys.len()
    }

    pub fn answer(&self) -> Token {
        *self.values.last().expect("chains have at least two hops")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub seed: u64,
    pub chain: FactChain,
    /// Distractor keys and the wrong values they resolve to.
    pub distractors: Vec<(Token, Token)>,
    pub padding: usize,
    pub s0: Vec<Token>,
}

/// Samples a chain, its distractors and the question block `[QUESTION, keys[0], ASK]`.
pub fn generate_task(vocab: &Vocab, cfg: &EnvConfig, rng_seed: u64) -> Result<Task> {
    cfg.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut keys: Vec<Token> = vocab.keys().map(|i| Token(i as u16)).collect();
    keys.shuffle(&mut rng);
    let values: Vec<Token> = vocab.values().map(|i| Token(i as u16)).collect();
    let answer = *values.choose(&mut rng).expect("vocab has values");
    let chain_keys = keys[..cfg.hops].to_vec();
    let mut chain_values: Vec<Token> = chain_keys[1..].to_vec();
    chain_values.push(answer);
    let wrong: Vec<Token> = values.iter().copied().filter(|&v| v != answer).collect();
    let distractors = keys[cfg.hops..cfg.hops + cfg.distractors]
        .iter()
        .map(|&k| (k, *wrong.choose(&mut rng).expect("at least two values")))
        .collect();
    let s0 = vec![Token::QUESTION, chain_keys[0], Token::ASK];
    Ok(Task { seed: rng_seed, chain: FactChain { keys: chain_keys, values: chain_values }, distractors, padding: cfg.padding, s0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Search(Token),
    Answer(Token),
}

/// Parses `SEARCH key END` or `ANSWER value END`.
pub fn parse_action(tokens: &[Token], vocab: &Vocab) -> Option<Action> {
    match tokens {
        [Token::SEARCH, k, Token::END] if vocab.is_key(*k) => Some(Action::Search(*k)),
        [Token::ANSWER, v, Token::END] if vocab.is_value(*v) => Some(Action::Answer(*v)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<Token>,
    pub done: bool,
    pub task_reward: f64,
}

/// One running episode.
#[derive(Clone, Debug)]
pub struct Env {
    vocab: Vocab,
    task: Task,
    lookup: HashMap<Token, Token>,
    rng: ChaCha8Rng,
    max_turns: usize,
    turns: usize,
    done: bool,
}

impl Env {
    pub fn new(vocab: Vocab, task: Task, max_turns: usize) -> Self {
        let lookup = task
            .chain
            .keys
            .iter()
            .copied()
            .zip(task.chain.values.iter().copied())
            .chain(task.distractors.iter().copied())
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0x5eed_0b5e_u64);
        Self { vocab, task, lookup, rng, max_turns, turns: 0, done: false }
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    /// Turns remaining before the cap, including the current one.
    pub fn remaining(&self) -> usize {
        self.max_turns.saturating_sub(self.turns)
    }

    /// Applies the action tokens of one turn (summary block already removed).
    pub fn step(&mut self, action_tokens: &[Token]) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        self.turns += 1;
        let last = self.turns >= self.max_turns;
        let mut out = match parse_action(action_tokens, &self.vocab) {
            Some(Action::Answer(v)) => {
                self.done = true;
                let reward = if v == self.task.chain.answer() { 1.0 } else { 0.0 };
                return Ok(EnvStep { observation: Vec::new(), done: true, task_reward: reward });
            }
            Some(Action::Search(k)) => match self.lookup.get(&k) {
                Some(&v) => self.fact_observation(k, v),
                None => vec![Token::NO_RESULT],
            },
            None => vec![Token::MALFORMED],
        };
        if last {
            self.done = true;
            out.clear();
            return Ok(EnvStep { observation: out, done: true, task_reward: 0.0 });
        }
        Ok(EnvStep { observation: out, done: false, task_reward: 0.0 })
    }

    fn fact_observation(&mut self, k: Token, v: Token) -> Vec<Token> {
        let mut obs = vec![Token::FACT, k, v];
        let fillers = self.vocab.fillers();
        for _ in 0..self.task.padding {
            let tok = if !self.task.distractors.is_empty() && self.rng.gen_bool(0.25) {
                self.task.distractors.choose(&mut self.rng).unwrap().0
            } else {
                Token(self.rng.gen_range(fillers.clone()) as u16)
            };
            obs.push(tok);
        }
        obs
    }
}

/// Whether `fact` occurs contiguously inside one of the history's observations.
pub fn contains_fact(history: &FullHistory, fact: &[Token]) -> bool {
    history.observations().any(|o| contains_subsequence(o, fact))
}

/// The key the scripted solver should search next, or the answer it should give.
///
/// Reads the most recent `FACT k v` triple or information-summary pair in the
/// context; falls back to the question key.
pub fn oracle_target(context: &[Token], vocab: &Vocab) -> Option<Token> {
    let mut latest = None;
    for (i, &t) in context.iter().enumerate() {
        if t == Token::FACT && i + 2 < context.len() {
            latest = Some(context[i + 2]);
        }
        if t == Token::INFO_OPEN && i + 2 < context.len() && vocab.is_entity(context[i + 2]) {
            latest = Some(context[i + 2]);
        }
    }
    latest.or_else(|| (context.len() >= 2 && context[0] == Token::QUESTION).then(|| context[1]))
}

/// Scripted solver response. When `fold` is set, the response opens with a
/// grounded summary carrying the live fact.
pub fn oracle_response(context: &[Token], vocab: &Vocab, fold: bool) -> Vec<Token> {
    let target = oracle_target(context, vocab).unwrap_or(Token::END);
    let mut r = Vec::new();
    if fold {
        r.push(Token::THINK_OPEN);
        r.push(target);
        r.push(Token::THINK_CLOSE);
        if let Some(fact) = latest_fact(context) {
            r.extend([Token::INFO_OPEN, fact.0, fact.1, Token::INFO_CLOSE]);
        }
    }
    if vocab.is_value(target) {
        r.extend([Token::ANSWER, target, Token::END]);
    } else {
        r.extend([Token::SEARCH, target, Token::END]);
    }
    r
}

fn latest_fact(context: &[Token]) -> Option<(Token, Token)> {
    let mut latest = None;
    for i in 0..context.len() {
        if (context[i] == Token::FACT || context[i] == Token::INFO_OPEN) && i + 2 < context.len() {
            latest = Some((context[i + 1], context[i + 2]));
        }
    }
    latest
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(64).unwrap()
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = EnvConfig { hops: 2, distractors: 0, ..EnvConfig::toy() };
        assert_eq!(generate_task(&vocab(), &cfg, 7).unwrap(), generate_task(&vocab(), &cfg, 7).unwrap());
    }

    #[test]
    fn chain_links_keys_to_values() {
        let t = generate_task(&vocab(), &EnvConfig::web_like(), 3).unwrap();
        let v = vocab();
        for i in 0..t.chain.hops() - 1 {
            assert_eq!(t.chain.values[i], t.chain.keys[i + 1]);
        }
        assert!(v.is_value(t.chain.answer()));
        assert!(t.distractors.iter().all(|(k, w)| !t.chain.keys.contains(k) && *w != t.chain.answer()));
    }

    #[test]
    fn too_many_hops_is_rejected() {
        let cfg = EnvConfig { hops: 9, ..EnvConfig::toy() };
        assert!(matches!(generate_task(&vocab(), &cfg, 1), Err(Error::Precondition(_))));
        let cfg = EnvConfig { hops: 8, distractors: 30, max_hops: 8, padding: 0, ..EnvConfig::toy() };
        assert!(matches!(generate_task(&vocab(), &cfg, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn search_and_answer_semantics() {
        let v = vocab();
        let t = generate_task(&v, &EnvConfig { distractors: 4, ..EnvConfig::toy() }, 11).unwrap();
        let mut env = Env::new(v, t.clone(), 10);
        let s = env.step(&[Token::SEARCH, t.chain.keys[1], Token::END]).unwrap();
        assert_eq!(&s.observation[..3], &[Token::FACT, t.chain.keys[1], t.chain.values[1]]);
        assert_eq!(s.observation.len(), 3 + t.padding);
        assert!(!s.done);
        let unknown = v.keys().map(|i| Token(i as u16)).find(|k| !env.lookup.contains_key(k)).unwrap();
        assert_eq!(env.step(&[Token::SEARCH, unknown, Token::END]).unwrap().observation, vec![Token::NO_RESULT]);
        assert_eq!(env.step(&[Token::END]).unwrap().observation, vec![Token::MALFORMED]);
        let mut right = env.clone();
        let win = right.step(&[Token::ANSWER, t.chain.answer(), Token::END]).unwrap();
        assert_eq!((win.done, win.task_reward), (true, 1.0));
        assert!(win.observation.is_empty());
        let wrong = t.distractors[0].1;
        let lose = env.step(&[Token::ANSWER, wrong, Token::END]).unwrap();
        assert_eq!((lose.done, lose.task_reward), (true, 0.0));
        assert!(env.step(&[Token::END]).is_err());
    }

    #[test]
    fn turn_cap_ends_with_zero_reward() {
        let v = vocab();
        let t = generate_task(&v, &EnvConfig::toy(), 2).unwrap();
        let mut env = Env::new(v, t.clone(), 2);
        assert!(!env.step(&[Token::END]).unwrap().done);
        let last = env.step(&[Token::SEARCH, t.chain.keys[0], Token::END]).unwrap();
        assert!(last.done && last.task_reward == 0.0 && last.observation.is_empty());
    }

    fn solve(task: &Task, v: Vocab) -> (usize, f64) {
        let mut env = Env::new(v, task.clone(), EnvConfig::toy().max_turns().max(2 * task.chain.hops() + 4));
        let mut ctx = task.s0.clone();
        let mut searches = 0;
        loop {
            let r = oracle_response(&ctx, &v, false);
            if r[0] == Token::SEARCH {
                searches += 1;
            }
            let s = env.step(&r).unwrap();
            ctx.extend(&r);
            ctx.extend(&s.observation);
            if s.done {
                return (searches, s.task_reward);
            }
        }
    }

    #[test]
    fn oracle_solves_in_exactly_n_searches() {
        let v = vocab();
        for seed in 0..50 {
            for cfg in [EnvConfig::toy(), EnvConfig::web_like()] {
                let t = generate_task(&v, &cfg, seed).unwrap();
                assert_eq!(solve(&t, v), (cfg.hops, 1.0), "seed {seed}");
            }
        }
    }

    #[test]
    fn web_like_history_outgrows_the_window() {
        let v = vocab();
        let cfg = EnvConfig::web_like();
        let t = generate_task(&v, &cfg, 4).unwrap();
        let mut env = Env::new(v, t.clone(), cfg.max_turns());
        let mut ctx = t.s0.clone();
        for _ in 0..cfg.hops {
            let r = oracle_response(&ctx, &v, false);
            ctx.extend(&r);
            ctx.extend(env.step(&r).unwrap().observation);
        }
        // Context at the answering turn.
        assert!(ctx.len() > crate::policy::Arch::default().window, "{}", ctx.len());
    }

    #[test]
    fn contains_fact_detects_inserted_facts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fact = [Token(30), Token(55)];
        for _ in 0..200 {
            let s0 = [Token::QUESTION, Token(20), Token::ASK];
            let mut h = FullHistory::new(&s0);
            let turns = rng.gen_range(1..6);
            let target = rng.gen_range(0..turns);
            for t in 0..turns {
                // Scrambled observations use only fillers, so the fact cannot occur by chance.
                let mut obs: Vec<Token> = (0..rng.gen_range(0..10)).map(|_| Token(rng.gen_range(12..20))).collect();
                if t == target {
                    let at = rng.gen_range(0..=obs.len());
                    obs.splice(at..at, fact);
                }
                // The fact inside a response must not count.
                h.push_turn(&[Token::SEARCH, fact[0], fact[1]], &obs);
            }
            assert!(contains_fact(&h, &fact));
            let mut scrubbed = FullHistory::new(&s0);
            for o in h.observations().map(|o| o.iter().filter(|t| t.id() < 20).copied().collect::<Vec<_>>()).collect::<Vec<_>>() {
                scrubbed.push_turn(&[Token::SEARCH, fact[0], fact[1]], &o);
            }
            assert!(!contains_fact(&scrubbed, &fact));
        }
        assert!(!contains_fact(&FullHistory::new(&[Token::QUESTION]), &fact));
    }
}
