//! Symbolic vocabulary shared by the policy and the environment.
//!
//! Ids `0..RESERVED` are structural tokens (question framing, action verbs,
//! summary tags, observation markers). The remainder of the vocabulary is
//! split into filler tokens (observation noise), key tokens (searchable
//! entities) and value tokens (answers).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const QUESTION: Token = Token(0);
    pub const ASK: Token = Token(1);
    pub const SEARCH: Token = Token(2);
    pub const ANSWER: Token = Token(3);
    pub const END: Token = Token(4);
    pub const THINK_OPEN: Token = Token(5);
    pub const THINK_CLOSE: Token = Token(6);
    pub const INFO_OPEN: Token = Token(7);
    pub const INFO_CLOSE: Token = Token(8);
    pub const FACT: Token = Token(9);
    pub const NO_RESULT: Token = Token(10);
    pub const MALFORMED: Token = Token(11);

    #[inline]
    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn is_summary_tag(self) -> bool {
        matches!(
            self,
            Token::THINK_OPEN | Token::THINK_CLOSE | Token::INFO_OPEN | Token::INFO_CLOSE
        )
    }
}

/// Display names of the structural tokens, indexed by id.
const NAMES: [&str; RESERVED] = [
    "<q>",
    "<ask>",
    "SEARCH",
    "ANSWER",
    "END",
    "<think_summary>",
    "</think_summary>",
    "<information_summary>",
    "</information_summary>",
    "FACT",
    "NO_RESULT",
    "MALFORMED",
];

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match NAMES.get(self.id()) {
            Some(name) => f.write_str(name),
            None => write!(f, "t{}", self.0),
        }
    }
}

/// Inverse of `Display`: a structural name or `t<id>`.
impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(i) = NAMES.iter().position(|n| *n == s) {
            return Ok(Token(i as u16));
        }
        match s.strip_prefix('t').and_then(|d| d.parse::<u16>().ok()) {
            Some(id) if id as usize >= RESERVED => Ok(Token(id)),
            _ => Err(Error::Format { path: "token".into(), reason: format!("unknown token `{s}`") }),
        }
    }
}

/// Parses whitespace-separated token names.
pub fn parse_tokens(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace().map(str::parse).collect()
}

/// Number of structural token ids.
pub const RESERVED: usize = 12;

/// Smallest vocabulary that can host at least one filler, two keys and two values.
pub const MIN_ENV_VOCAB: usize = RESERVED + 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size > u16::MAX as usize {
            return Err(Error::Precondition(format!("vocabulary size {size} out of range")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn token(&self, id: usize) -> Result<Token> {
        if id < self.size {
            Ok(Token(id as u16))
        } else {
            Err(Error::TokenOutOfRange { id, vocab_size: self.size })
        }
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.id() >= self.size) {
            Some(t) => Err(Error::TokenOutOfRange { id: t.id(), vocab_size: self.size }),
            None => Ok(()),
        }
    }

    fn free(&self) -> usize {
        self.size.saturating_sub(RESERVED)
    }

    pub fn fillers(&self) -> Range<usize> {
        let n = (self.free() * 2 / 13).max(usize::from(self.free() > 0));
        RESERVED..RESERVED + n
    }

    pub fn values(&self) -> Range<usize> {
        let n = self.free() * 3 / 13;
        self.size - n..self.size
    }

    pub fn keys(&self) -> Range<usize> {
        self.fillers().end..self.values().start
    }

    pub fn is_key(&self, t: Token) -> bool {
        self.keys().contains(&t.id())
    }

    pub fn is_value(&self, t: Token) -> bool {
        self.values().contains(&t.id())
    }

    pub fn is_entity(&self, t: Token) -> bool {
        self.is_key(t) || self.is_value(t)
    }

    /// Whether the environment can be hosted at all.
    pub fn supports_env(&self) -> bool {
        self.size >= MIN_ENV_VOCAB && self.values().len() >= 2 && self.keys().len() >= 2
    }
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let v = Vocab::new(64).unwrap();
        assert_eq!(v.fillers(), 12..20);
        assert_eq!(v.keys(), 20..52);
        assert_eq!(v.values(), 52..64);
        assert!(v.supports_env());
    }

    #[test]
    fn ranges_partition_free_ids() {
        for size in MIN_ENV_VOCAB..200 {
            let v = Vocab::new(size).unwrap();
            assert_eq!(v.fillers().start, RESERVED);
            assert_eq!(v.fillers().end, v.keys().start);
            assert_eq!(v.keys().end, v.values().start);
            assert_eq!(v.values().end, size);
        }
    }

    #[test]
    fn names_round_trip() {
        let tokens: Vec<Token> = (0..40).map(Token).collect();
        assert_eq!(parse_tokens(&render(&tokens)).unwrap(), tokens);
        assert!(parse_tokens("SEARCH t3").is_err());
        assert!(parse_tokens("SEARCH bogus").is_err());
    }

    #[test]
    fn out_of_range_token() {
        let v = Vocab::new(16).unwrap();
        assert!(v.token(15).is_ok());
        assert!(matches!(v.token(16), Err(Error::TokenOutOfRange { id: 16, vocab_size: 16 })));
    }
}
