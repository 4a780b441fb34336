//! Small causal self-attention policy with hand-written backpropagation.
//!
//! Every forward computation goes through [`Activations::push`], one position
//! at a time, so incremental decoding and full teacher-forced passes perform
//! identical floating-point operations and agree bitwise.

mod backward;
mod checkpoint;
mod forward;
mod optim;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Token;

pub use backward::{LossGraph, ScoredResponse};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_EXTENSION};
pub use forward::{Activations, Decoder};
pub use optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context window W; longer contexts are truncated from the left.
    pub window: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { vocab_size: 64, d_model: 32, n_layers: 2, n_heads: 4, window: 256 }
    }
}

impl Arch {
    pub fn hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(Error::Precondition(format!("architecture: {reason}")));
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize {
            return fail("vocab_size must be in [2, 65535]");
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.window == 0 {
            return fail("all dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(a: &Arch) -> Self {
        let (v, d, h, w) = (a.vocab_size, a.d_model, a.hidden(), a.window);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(w * d);
        let layers = (0..a.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * h),
                b1: take(h),
                w2: take(h * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, total: at }
    }

    /// Ranges of layer-norm gains, which are initialised to one.
    fn gains(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let mut g: Vec<_> = self.layers.iter().flat_map(|l| [l.ln1_g..l.ln1_g + d, l.ln2_g..l.ln2_g + d]).collect();
        g.push(self.lnf_g..self.lnf_g + d);
        g
    }

    fn biases(&self, a: &Arch) -> Vec<std::ops::Range<usize>> {
        let (d, h) = (a.d_model, a.hidden());
        let mut b: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.ln1_b..l.ln1_b + d, l.ln2_b..l.ln2_b + d, l.b1..l.b1 + h, l.b2..l.b2 + d])
            .collect();
        b.push(self.lnf_b..self.lnf_b + d);
        b.push(self.b_out..self.b_out + a.vocab_size);
        b
    }
}

/// Parameters of the autoregressive policy at one point in time.
#[derive(Clone, Debug)]
pub struct Policy {
    arch: Arch,
    layout: Layout,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.version == other.version && self.params == other.params
    }
}

impl Policy {
    /// All parameters zero: every next-token distribution is uniform.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let params = vec![0.0; layout.total];
        Ok(Self { arch, layout, params, version: 0 })
    }

    /// Gaussian weights (std `init_std`), unit norm gains, zero biases.
    pub fn init(arch: Arch, init_std: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.params.iter_mut() {
            *x = init_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        for r in p.layout.biases(&arch) {
            p.params[r].iter_mut().for_each(|x| *x = 0.0);
        }
        for r in p.layout.gains(arch.d_model) {
            p.params[r].iter_mut().for_each(|x| *x = 1.0);
        }
        Ok(p)
    }

    pub fn from_params(arch: Arch, params: Vec<f64>, version: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::Precondition(format!(
                "expected {} parameters for {:?}, got {}",
                layout.total,
                arch,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { arch, layout, params, version })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Frozen copy for use as θ_old. Only the live policy's version advances.
    pub fn snapshot(&mut self) -> Policy {
        let frozen = self.clone();
        self.version += 1;
        frozen
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.id() >= self.arch.vocab_size) {
            Some(t) => Err(Error::TokenOutOfRange { id: t.id(), vocab_size: self.arch.vocab_size }),
            None => Ok(()),
        }
    }

    /// Next-token distribution after `context` (left-truncated to the window).
    pub fn forward_distribution(&self, context: &[Token]) -> Result<NextTokenDistribution> {
        if context.is_empty() {
            return Err(Error::Precondition("context must hold at least one token".into()));
        }
        self.check_tokens(context)?;
        let start = context.len().saturating_sub(self.arch.window);
        let acts = Activations::run(self, &context[start..])?;
        let logits = acts.logits(acts.len() - 1).to_vec();
        Ok(NextTokenDistribution::from_logits(logits))
    }

    /// Per-token `log π(r_i | context ⊕ r_<i)`.
    pub fn sequence_logprob(&self, context: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        Ok(ScoredResponse::score(self, context, response)?.logprobs)
    }

    /// Ancestral sampling until a stop token or `max_len` tokens.
    pub fn sample_response(
        &self,
        context: &[Token],
        stop_set: &[Token],
        max_len: usize,
        rng_seed: u64,
    ) -> Result<(Vec<Token>, Vec<f64>)> {
        if max_len == 0 {
            return Err(Error::Precondition("max_len must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut dec = Decoder::new(self, context)?;
        let all: Vec<Token> = (0..self.arch.vocab_size).map(|i| Token(i as u16)).collect();
        let (mut out, mut lps) = (Vec::new(), Vec::new());
        while out.len() < max_len {
            let logits = dec.next_logits()?;
            let (tok, lp) = sample_restricted(&logits, &all, &mut rng);
            dec.push(tok);
            out.push(tok);
            lps.push(lp);
            if stop_set.contains(&tok) {
                break;
            }
        }
        Ok((out, lps))
    }

    /// Applies `params += delta`.
    pub fn apply_delta(&mut self, delta: &[f64]) {
        for (p, d) in self.params.iter_mut().zip(delta) {
            *p += d;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextTokenDistribution {
    pub logits: Vec<f64>,
    pub logprobs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let logprobs = log_softmax(&logits);
        Self { logits, logprobs }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logprobs.iter().map(|l| l.exp()).collect()
    }
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| (x - lse).min(0.0)).collect()
}

/// Samples among `allowed` with probability proportional to `exp(logit)`,
/// returning the token and its log-probability under the *full* softmax.
/// Log-normaliser over the `allowed` entries of `logits`, gathered in order.
pub fn restricted_log_sum_exp(logits: &[f64], allowed: &[Token]) -> f64 {
    let gathered: Vec<f64> = allowed.iter().map(|t| logits[t.id()]).collect();
    log_sum_exp(&gathered)
}

/// Samples from the softmax renormalised over `allowed` and returns the
/// token with its log-probability under that distribution.
pub fn sample_restricted(logits: &[f64], allowed: &[Token], rng: &mut impl Rng) -> (Token, f64) {
    debug_assert!(!allowed.is_empty());
    if allowed.len() == 1 {
        return (allowed[0], 0.0);
    }
    let lse = restricted_log_sum_exp(logits, allowed);
    let m = allowed.iter().map(|t| logits[t.id()]).fold(f64::NEG_INFINITY, f64::max);
    let weights = allowed.iter().map(|t| (logits[t.id()] - m).exp());
    let pick = WeightedIndex::new(weights).expect("the maximum logit has weight one");
    let tok = allowed[pick.sample(rng)];
    (tok, (logits[tok.id()] - lse).min(0.0))
}
