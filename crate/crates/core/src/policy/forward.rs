use crate::error::{Error, Result};
use crate::vocab::Token;

use super::{Arch, Policy};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, Default)]
pub(crate) struct LayerActs {
    pub xhat1: Vec<f64>,
    pub rstd1: Vec<f64>,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights; position i holds `n_heads * (i + 1)` entries.
    pub probs: Vec<f64>,
    pub y: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub rstd2: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

impl LayerActs {
    pub fn probs_offset(i: usize, heads: usize) -> usize {
        heads * i * (i + 1) / 2
    }
}

/// Cached activations of one causal pass over a window of tokens.
#[derive(Clone, Debug)]
pub struct Activations {
    pub(crate) arch: Arch,
    pub(crate) tokens: Vec<Token>,
    pub(crate) layers: Vec<LayerActs>,
    pub(crate) xhatf: Vec<f64>,
    pub(crate) rstdf: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

impl Activations {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            tokens: Vec::new(),
            layers: vec![LayerActs::default(); arch.n_layers],
            xhatf: Vec::new(),
            rstdf: Vec::new(),
            f: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub fn run(policy: &Policy, tokens: &[Token]) -> Result<Self> {
        let mut acts = Self::new(*policy.arch());
        for &t in tokens {
            acts.push(policy, t)?;
        }
        Ok(acts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn logits(&self, pos: usize) -> &[f64] {
        let v = self.arch.vocab_size;
        &self.logits[pos * v..(pos + 1) * v]
    }

    /// Extends the pass by one position.
    pub fn push(&mut self, policy: &Policy, tok: Token) -> Result<()> {
        let arch = self.arch;
        let (d, h, heads, dh) = (arch.d_model, arch.hidden(), arch.n_heads, arch.head_dim());
        let i = self.tokens.len();
        if i >= arch.window {
            return Err(Error::Precondition(format!("pass longer than window {}", arch.window)));
        }
        if tok.id() >= arch.vocab_size {
            return Err(Error::TokenOutOfRange { id: tok.id(), vocab_size: arch.vocab_size });
        }
        let p = policy.params();
        let lay = policy.layout();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f64> = (0..d).map(|c| p[lay.tok_emb + tok.id() * d + c] + p[lay.pos_emb + i * d + c]).collect();
        let mut scores = vec![0.0; i + 1];

        for (l, lo) in lay.layers.iter().enumerate() {
            let la = &mut self.layers[l];

            let (xhat, rstd) = norm_stats(&x);
            let a: Vec<f64> = (0..d).map(|c| xhat[c] * p[lo.ln1_g + c] + p[lo.ln1_b + c]).collect();
            la.xhat1.extend_from_slice(&xhat);
            la.rstd1.push(rstd);
            let q = matvec(&a, &p[lo.wq..lo.wq + d * d], d);
            let k = matvec(&a, &p[lo.wk..lo.wk + d * d], d);
            let v = matvec(&a, &p[lo.wv..lo.wv + d * d], d);
            la.a.extend_from_slice(&a);
            la.q.extend_from_slice(&q);
            la.k.extend_from_slice(&k);
            la.v.extend_from_slice(&v);

            let mut y = vec![0.0; d];
            for hh in 0..heads {
                let off = hh * dh;
                let slope = recency_slope(hh, heads);
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &la.k[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[off + c] * kj[c];
                    }
                    *s = acc * scale - slope * (i - j) as f64;
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter_mut().enumerate() {
                    *s /= sum;
                    let vj = &la.v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        y[off + c] += *s * vj[c];
                    }
                }
                la.probs.extend_from_slice(&scores);
            }
            let o = matvec(&y, &p[lo.wo..lo.wo + d * d], d);
            la.y.extend_from_slice(&y);
            let x1: Vec<f64> = (0..d).map(|c| x[c] + o[c]).collect();

            let (xhat2, rstd2) = norm_stats(&x1);
            let b: Vec<f64> = (0..d).map(|c| xhat2[c] * p[lo.ln2_g + c] + p[lo.ln2_b + c]).collect();
            let mut u = matvec(&b, &p[lo.w1..lo.w1 + d * h], h);
            for (uu, bias) in u.iter_mut().zip(&p[lo.b1..lo.b1 + h]) {
                *uu += bias;
            }
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut m = matvec(&g, &p[lo.w2..lo.w2 + h * d], d);
            for (mm, bias) in m.iter_mut().zip(&p[lo.b2..lo.b2 + d]) {
                *mm += bias;
            }
            la.xhat2.extend_from_slice(&xhat2);
            la.rstd2.push(rstd2);
            la.b.extend_from_slice(&b);
            la.u.extend_from_slice(&u);
            la.g.extend_from_slice(&g);

            for c in 0..d {
                x[c] = x1[c] + m[c];
            }
            if !x.iter().all(|z| z.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
        }

        let (xhat, rstd) = norm_stats(&x);
        let f: Vec<f64> = (0..d).map(|c| xhat[c] * p[lay.lnf_g + c] + p[lay.lnf_b + c]).collect();
        let vsz = arch.vocab_size;
        let mut z = matvec(&f, &p[lay.w_out..lay.w_out + d * vsz], vsz);
        for (zz, bias) in z.iter_mut().zip(&p[lay.b_out..lay.b_out + vsz]) {
            *zz += bias;
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: arch.n_layers });
        }
        self.xhatf.extend_from_slice(&xhat);
        self.rstdf.push(rstd);
        self.f.extend_from_slice(&f);
        self.logits.extend_from_slice(&z);
        self.tokens.push(tok);
        Ok(())
    }
}

/// `a · W` for a row-major `W` of shape `[a.len(), out]`.
#[inline]
pub(crate) fn matvec(a: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (k, &ak) in a.iter().enumerate() {
        let row = &w[k * out..(k + 1) * out];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += ak * wj;
        }
    }
    y
}

/// Fixed per-head penalty per token of distance in attention scores; head k of
/// H uses `2^(-8(k+1)/H)`, so some heads look locally and others globally.
pub fn recency_slope(head: usize, heads: usize) -> f64 {
    (-8.0 * (head + 1) as f64 / heads as f64).exp2()
}

fn norm_stats(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Incremental decoder over a growing sequence.
///
/// While the sequence fits in the window, positions are appended to one
/// cached pass. Once it overflows, every step re-runs a fresh pass over the
/// last W tokens, matching [`super::ScoredResponse::score`] exactly.
pub struct Decoder<'p> {
    policy: &'p Policy,
    seq: Vec<Token>,
    acts: Activations,
    start: usize,
    forward_tokens: usize,
    truncations: usize,
}

impl<'p> Decoder<'p> {
    pub fn new(policy: &'p Policy, context: &[Token]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::Precondition("context must hold at least one token".into()));
        }
        policy.check_tokens(context)?;
        Ok(Self {
            policy,
            seq: context.to_vec(),
            acts: Activations::new(*policy.arch()),
            start: 0,
            forward_tokens: 0,
            truncations: 0,
        })
    }

    fn sync(&mut self) -> Result<()> {
        let w = self.policy.arch().window;
        let want = self.seq.len().saturating_sub(w);
        if want != self.start {
            self.acts = Activations::new(*self.policy.arch());
            self.start = want;
        }
        if want > 0 {
            self.truncations += 1;
        }
        while self.start + self.acts.len() < self.seq.len() {
            let t = self.seq[self.start + self.acts.len()];
            self.acts.push(self.policy, t)?;
            self.forward_tokens += 1;
        }
        Ok(())
    }

    /// Logits for the token following the current sequence.
    pub fn next_logits(&mut self) -> Result<Vec<f64>> {
        self.sync()?;
        Ok(self.acts.logits(self.acts.len() - 1).to_vec())
    }

    pub fn push(&mut self, tok: Token) {
        self.seq.push(tok);
    }

    pub fn sequence(&self) -> &[Token] {
        &self.seq
    }

    pub fn forward_tokens(&self) -> usize {
        self.forward_tokens
    }

    /// Decode steps whose conditioning prefix exceeded the window.
    pub fn truncations(&self) -> usize {
        self.truncations
    }
}
