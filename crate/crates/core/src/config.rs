//! Run configuration: strict TOML parsing, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::losses::{ConsistencyMode, LossConfig};
use crate::policy::Arch;
use crate::rewards::{AdvantageConfig, RewardConfig};
use crate::rollout::RolloutConfig;
use crate::vocab::Vocab;

/// Ablations of the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    Foldact,
    /// Folding and separated losses, no consistency term.
    NoConsistency,
    /// Every turn trained on its uncompressed history; no consistency term.
    FullContextTraining,
    /// Folding disabled at rollout time.
    NoFolding,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 4] =
        [BaselineMode::Foldact, BaselineMode::NoConsistency, BaselineMode::FullContextTraining, BaselineMode::NoFolding];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMode::Foldact => "foldact",
            BaselineMode::NoConsistency => "no_consistency",
            BaselineMode::FullContextTraining => "full_context_training",
            BaselineMode::NoFolding => "no_folding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Probability that a turn is left out of the loss.
    pub p_drop: f64,
    pub bias_late_turns: bool,
    pub clip_eps: f64,
    pub lambda_consistency: f64,
    pub consistency_mode: ConsistencyMode,
    pub stop_gradient_full_context: bool,
    pub baseline_mode: BaselineMode,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub init_std: f64,
    /// Checkpoint cadence in steps; the initial and final states are always saved.
    pub checkpoint_every: usize,
    pub env: EnvConfig,
    pub rollout: RolloutConfig,
    pub policy: Arch,
    pub rewards: RewardConfig,
    pub advantages: AdvantageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 200,
            batch_size: 16,
            p_drop: 0.0,
            bias_late_turns: false,
            clip_eps: 0.2,
            lambda_consistency: 1.0,
            consistency_mode: ConsistencyMode::McGeneratedTokens,
            stop_gradient_full_context: false,
            baseline_mode: BaselineMode::Foldact,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            init_std: 0.1,
            checkpoint_every: 50,
            env: EnvConfig::toy(),
            rollout: RolloutConfig::default(),
            policy: Arch::default(),
            rewards: RewardConfig::default(),
            advantages: AdvantageConfig::default(),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(bad("p_drop", format!("must be in [0, 1), got {}", self.p_drop)));
        }
        for (key, v) in [("batch_size", self.batch_size), ("checkpoint_every", self.checkpoint_every)] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(bad("clip_eps", format!("must be in (0, 1), got {}", self.clip_eps)));
        }
        if !(self.lambda_consistency >= 0.0 && self.lambda_consistency.is_finite()) {
            return Err(bad("lambda_consistency", "must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be finite and positive"));
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(key, "must be in [0, 1)"));
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(bad("init_std", "must be finite and non-negative"));
        }
        if self.rollout.seed != 0 {
            return Err(bad("rollout.seed", "sampling seeds derive from the top-level `seed`; leave this unset"));
        }
        self.policy.validate().map_err(|e| bad("policy", e.to_string()))?;
        let vocab = Vocab::new(self.policy.vocab_size).map_err(|e| bad("policy.vocab_size", e.to_string()))?;
        self.env.validate(&vocab).map_err(|e| bad("env", e.to_string()))?;
        self.effective_rollout().validate(self.policy.window)?;
        Ok(())
    }

    /// Rollout settings after the baseline mode is applied.
    pub fn effective_rollout(&self) -> RolloutConfig {
        let mut r = self.rollout.clone();
        r.max_turns = r.max_turns.or(Some(self.env.max_turns()));
        if self.baseline_mode == BaselineMode::NoFolding {
            r.fold_trigger_len = None;
        }
        r
    }

    /// Loss settings after the baseline mode is applied.
    pub fn loss_config(&self) -> LossConfig {
        let consistency = match self.baseline_mode {
            BaselineMode::Foldact | BaselineMode::NoFolding => Some(self.consistency_mode),
            BaselineMode::NoConsistency | BaselineMode::FullContextTraining => None,
        };
        LossConfig {
            clip_eps: self.clip_eps,
            lambda_consistency: self.lambda_consistency,
            consistency,
            stop_gradient_full_context: self.stop_gradient_full_context,
            train_on_full_history: self.baseline_mode == BaselineMode::FullContextTraining,
            support: Some(self.rollout.support()),
        }
    }

    /// Drop probability after the baseline mode is applied.
    pub fn effective_p_drop(&self) -> f64 {
        if self.baseline_mode == BaselineMode::FullContextTraining {
            0.0
        } else {
            self.p_drop
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Stable content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        crate::rundir::sha256_hex(self.to_toml().as_bytes())
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| describe_toml_error(&e, text))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Names the offending key and, for an unknown key, the closest valid one.
fn describe_toml_error(e: &toml::de::Error, text: &str) -> Error {
    let msg = e.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let (field, tail) = rest.split_once('`').unwrap_or((rest, ""));
        let expected: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
        let best = expected
            .iter()
            .map(|c| (strsim::jaro_winkler(field, c), *c))
            .filter(|(s, _)| *s > 0.7)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let reason = match best {
            Some((_, c)) => format!("unknown key; did you mean `{c}`?"),
            None => format!("unknown key; expected one of {}", expected.join(", ")),
        };
        return Error::Config { key: field.to_string(), reason };
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return Error::Config { key: field.to_string(), reason: "required key is missing".into() };
    }
    let key = e
        .span()
        .and_then(|span| {
            let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = &text[line_start..];
            line.split_once('=').map(|(k, _)| k.trim().to_string())
        })
        .unwrap_or_else(|| "<document>".to_string());
    Error::Config { key, reason: msg.trim().to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.clip_eps, 0.2);
        assert_eq!(c.lambda_consistency, 1.0);
        assert_eq!(c.p_drop, 0.0);
        assert_eq!(c.effective_rollout().max_turns, Some(5));
        assert_eq!(c.baseline_mode, BaselineMode::Foldact);
    }

    #[test]
    fn p_drop_of_one_is_rejected() {
        match parse_config("p_drop = 1.0") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "p_drop"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_gets_a_suggestion() {
        match parse_config("pdrop = 0.3") {
            Err(Error::Config { key, reason }) => {
                assert_eq!(key, "pdrop");
                assert!(reason.contains("`p_drop`"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        match parse_config("[env]\nhopz = 3") {
            Err(Error::Config { key, reason }) => {
                assert_eq!(key, "hopz");
                assert!(reason.contains("`hops`"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_name_their_key() {
        for (text, key) in [
            ("batch_size = 0", "batch_size"),
            ("clip_eps = 1.5", "clip_eps"),
            ("learning_rate = 0.0", "learning_rate"),
            ("[rollout]\nfold_trigger_len = 1000", "rollout.fold_trigger_len"),
            ("[rollout]\nseed = 3", "rollout.seed"),
            ("[env]\nhops = 40\nmax_hops = 40", "env"),
        ] {
            match parse_config(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn type_errors_name_their_key() {
        match parse_config("seed = 1\nbatch_size = \"many\"") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig { baseline_mode: BaselineMode::NoFolding, p_drop: 0.25, ..Default::default() };
        c.rollout.fold_trigger_len = None;
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn baseline_modes_shape_the_losses() {
        let mut c = RunConfig::default();
        assert!(c.loss_config().consistency.is_some());
        c.baseline_mode = BaselineMode::NoConsistency;
        assert!(c.loss_config().consistency.is_none());
        c.baseline_mode = BaselineMode::FullContextTraining;
        assert!(c.loss_config().train_on_full_history);
        assert_eq!(c.effective_p_drop(), 0.0);
        c.baseline_mode = BaselineMode::NoFolding;
        assert_eq!(c.effective_rollout().fold_trigger_len, None);
    }
}
