use crate::error::{Error, Result};
use crate::vocab::Token;

use super::forward::{gelu_grad, Activations, LayerActs};
use super::{log_sum_exp, restricted_log_sum_exp, Policy};

/// Forward passes needed to score `response` after `context`, plus
/// upstream gradients on their logits.
///
/// Response token i is predicted from the last W tokens of
/// `context ⊕ response[..i]`. Positions whose prefix fits in the window share
/// one pass; longer prefixes each get their own left-truncated pass.
#[derive(Clone, Debug)]
pub struct ScoredResponse {
    passes: Vec<Activations>,
    index: Vec<(usize, usize)>,
    response: Vec<Token>,
    pub logprobs: Vec<f64>,
    /// Tokens pushed through forward passes.
    pub forward_tokens: usize,
    /// Response positions whose prefix was left-truncated.
    pub truncated_positions: usize,
    seeds: Vec<Option<Vec<f64>>>,
    /// Allowed tokens per position when the distribution is restricted.
    supports: Option<Vec<Vec<Token>>>,
}

impl ScoredResponse {
    pub fn score(policy: &Policy, context: &[Token], response: &[Token]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::Precondition("context must hold at least one token".into()));
        }
        if response.is_empty() {
            return Err(Error::Precondition("response must be nonempty".into()));
        }
        policy.check_tokens(context)?;
        policy.check_tokens(response)?;
        let w = policy.arch().window;
        let seq: Vec<Token> = context.iter().chain(response).copied().collect();
        let n_ctx = context.len();

        let mut passes = Vec::new();
        let mut index = Vec::with_capacity(response.len());
        let mut forward_tokens = 0;
        let mut truncated_positions = 0;
        if n_ctx <= w {
            let len = (seq.len() - 1).min(w);
            passes.push(Activations::run(policy, &seq[..len])?);
            forward_tokens += len;
        }
        for i in 0..response.len() {
            let prefix = n_ctx + i;
            if prefix <= w {
                index.push((0, prefix - 1));
            } else {
                passes.push(Activations::run(policy, &seq[prefix - w..prefix])?);
                forward_tokens += w;
                truncated_positions += 1;
                index.push((passes.len() - 1, w - 1));
            }
        }
        let logprobs = index
            .iter()
            .zip(response)
            .map(|(&(pi, pos), r)| {
                let z = passes[pi].logits(pos);
                (z[r.id()] - log_sum_exp(z)).min(0.0)
            })
            .collect();
        let seeds = vec![None; passes.len()];
        Ok(Self {
            passes,
            index,
            response: response.to_vec(),
            logprobs,
            forward_tokens,
            truncated_positions,
            seeds,
            supports: None,
        })
    }

    /// Scores under the softmax renormalised over `supports[i]` at each position.
    pub fn score_restricted(policy: &Policy, context: &[Token], response: &[Token], supports: Vec<Vec<Token>>) -> Result<Self> {
        let mut s = Self::score(policy, context, response)?;
        s.restrict(supports)?;
        Ok(s)
    }

    /// Switches every position to the softmax renormalised over its allowed set.
    pub fn restrict(&mut self, supports: Vec<Vec<Token>>) -> Result<()> {
        if supports.len() != self.response.len() {
            return Err(Error::Precondition(format!("{} supports for {} response tokens", supports.len(), self.response.len())));
        }
        for (i, allowed) in supports.iter().enumerate() {
            if !allowed.contains(&self.response[i]) {
                return Err(Error::Precondition(format!("response token {i} lies outside its support")));
            }
            let z = self.logits(i);
            self.logprobs[i] = if allowed.len() == 1 {
                0.0
            } else {
                (z[self.response[i].id()] - restricted_log_sum_exp(z, allowed)).min(0.0)
            };
        }
        self.supports = Some(supports);
        Ok(())
    }

    pub fn support(&self, i: usize) -> Option<&[Token]> {
        self.supports.as_ref().map(|s| s[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn response(&self) -> &[Token] {
        &self.response
    }

    /// Logits that predicted response token `i`.
    pub fn logits(&self, i: usize) -> &[f64] {
        let (pi, pos) = self.index[i];
        self.passes[pi].logits(pos)
    }

    /// Log-distribution at response position `i`; `-inf` outside the support.
    pub fn log_distribution(&self, i: usize) -> Vec<f64> {
        let z = self.logits(i);
        match self.support(i) {
            None => super::log_softmax(z),
            Some(allowed) => {
                let mut out = vec![f64::NEG_INFINITY; z.len()];
                if allowed.len() == 1 {
                    out[allowed[0].id()] = 0.0;
                } else {
                    let lse = restricted_log_sum_exp(z, allowed);
                    for t in allowed {
                        out[t.id()] = (z[t.id()] - lse).min(0.0);
                    }
                }
                out
            }
        }
    }

    fn seed_row(&mut self, i: usize) -> &mut [f64] {
        let (pi, pos) = self.index[i];
        let v = self.passes[pi].arch.vocab_size;
        let len = self.passes[pi].len();
        let buf = self.seeds[pi].get_or_insert_with(|| vec![0.0; len * v]);
        &mut buf[pos * v..(pos + 1) * v]
    }

    /// Adds `coeff · ∂ log π(r_i) / ∂ logits` to the upstream gradient.
    pub fn seed_logprob(&mut self, i: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let target = self.response[i].id();
        let logp = self.log_distribution(i);
        let row = self.seed_row(i);
        for (x, (s, lp)) in row.iter_mut().zip(&logp).enumerate() {
            let p = lp.exp();
            *s += coeff * (if x == target { 1.0 - p } else { -p });
        }
    }

    /// Adds an arbitrary upstream gradient on the logits predicting token `i`.
    pub fn seed_logits(&mut self, i: usize, grad: &[f64]) {
        let row = self.seed_row(i);
        for (s, g) in row.iter_mut().zip(grad) {
            *s += g;
        }
    }

    /// Upstream gradient recorded on the logits predicting token `i`, if any.
    pub fn logit_gradient(&self, i: usize) -> Option<&[f64]> {
        let (pi, pos) = self.index[i];
        let v = self.passes[pi].arch.vocab_size;
        self.seeds[pi].as_deref().map(|b| &b[pos * v..(pos + 1) * v])
    }

    pub fn has_seeds(&self) -> bool {
        self.seeds.iter().any(|s| s.is_some())
    }

    /// Accumulates the gradient of the seeded loss into `grad`.
    pub fn backward_into(&self, policy: &Policy, grad: &mut [f64]) {
        for (acts, seed) in self.passes.iter().zip(&self.seeds) {
            if let Some(seed) = seed {
                backward_pass(policy, acts, seed, grad);
            }
        }
    }
}

/// A scalar loss recorded as seeded forward passes.
#[derive(Debug, Default)]
pub struct LossGraph {
    pub value: f64,
    items: Vec<ScoredResponse>,
}

impl LossGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item: ScoredResponse) {
        self.items.push(item);
    }

    pub fn extend(&mut self, other: LossGraph) {
        self.value += other.value;
        self.items.extend(other.items);
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ScoredResponse] {
        &self.items
    }

    pub fn forward_tokens(&self) -> usize {
        self.items.iter().map(|s| s.forward_tokens).sum()
    }
}

impl Policy {
    /// Exact gradient of the recorded loss with respect to every parameter.
    pub fn backward(&self, graph: &LossGraph) -> Result<Vec<f64>> {
        if graph.items.is_empty() {
            return Err(Error::NoForwardPass);
        }
        let mut grad = vec![0.0; self.num_params()];
        for item in &graph.items {
            item.backward_into(self, &mut grad);
        }
        Ok(grad)
    }
}

/// `grad[w + k*out + j] += a[k] * dy[j]`
#[inline]
fn outer_acc(grad: &mut [f64], w: usize, a: &[f64], dy: &[f64]) {
    let out = dy.len();
    for (k, &ak) in a.iter().enumerate() {
        if ak == 0.0 {
            continue;
        }
        let row = &mut grad[w + k * out..w + (k + 1) * out];
        for (g, d) in row.iter_mut().zip(dy) {
            *g += ak * d;
        }
    }
}

/// `W · dy` for `W` of shape `[in, out]`.
#[inline]
fn matvec_t(w: &[f64], dy: &[f64], inp: usize) -> Vec<f64> {
    let out = dy.len();
    (0..inp)
        .map(|k| {
            let row = &w[k * out..(k + 1) * out];
            row.iter().zip(dy).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Layer-norm backward for one position. Returns dL/dx.
fn norm_backward(dy: &[f64], xhat: &[f64], rstd: f64, gain: &[f64], grad: &mut [f64], g_off: usize, b_off: usize) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
    for c in 0..dy.len() {
        grad[g_off + c] += dy[c] * xhat[c];
        grad[b_off + c] += dy[c];
        dxhat[c] = dy[c] * gain[c];
        mean_dxhat += dxhat[c];
        mean_dxhat_xhat += dxhat[c] * xhat[c];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    (0..dy.len()).map(|c| rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat)).collect()
}

fn backward_pass(policy: &Policy, acts: &Activations, dlogits: &[f64], grad: &mut [f64]) {
    let arch = acts.arch;
    let (d, h, heads, dh, vsz) = (arch.d_model, arch.hidden(), arch.n_heads, arch.head_dim(), arch.vocab_size);
    let p = policy.params();
    let lay = policy.layout();
    let scale = 1.0 / (dh as f64).sqrt();

    // Causality: positions after the last seeded one receive no gradient.
    let Some(last) = (0..acts.len()).rev().find(|&i| dlogits[i * vsz..(i + 1) * vsz].iter().any(|&g| g != 0.0)) else {
        return;
    };
    let t = last + 1;

    let mut dx = vec![0.0; t * d];
    for i in 0..t {
        let dz = &dlogits[i * vsz..(i + 1) * vsz];
        if dz.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (j, g) in dz.iter().enumerate() {
            grad[lay.b_out + j] += g;
        }
        let f = &acts.f[i * d..(i + 1) * d];
        outer_acc(grad, lay.w_out, f, dz);
        let df = matvec_t(&p[lay.w_out..lay.w_out + d * vsz], dz, d);
        let dxi = norm_backward(
            &df,
            &acts.xhatf[i * d..(i + 1) * d],
            acts.rstdf[i],
            &p[lay.lnf_g..lay.lnf_g + d],
            grad,
            lay.lnf_g,
            lay.lnf_b,
        );
        dx[i * d..(i + 1) * d].copy_from_slice(&dxi);
    }

    for (l, lo) in lay.layers.iter().enumerate().rev() {
        let la: &LayerActs = &acts.layers[l];

        // MLP block: x2 = x1 + W2·gelu(W1·LN2(x1) + b1) + b2
        let mut dx1 = dx.clone();
        for i in 0..t {
            let dm = &dx[i * d..(i + 1) * d];
            for c in 0..d {
                grad[lo.b2 + c] += dm[c];
            }
            outer_acc(grad, lo.w2, &la.g[i * h..(i + 1) * h], dm);
            let dg = matvec_t(&p[lo.w2..lo.w2 + h * d], dm, h);
            let du: Vec<f64> = dg.iter().zip(&la.u[i * h..(i + 1) * h]).map(|(g, &u)| g * gelu_grad(u)).collect();
            for c in 0..h {
                grad[lo.b1 + c] += du[c];
            }
            outer_acc(grad, lo.w1, &la.b[i * d..(i + 1) * d], &du);
            let db = matvec_t(&p[lo.w1..lo.w1 + d * h], &du, d);
            let dxn = norm_backward(
                &db,
                &la.xhat2[i * d..(i + 1) * d],
                la.rstd2[i],
                &p[lo.ln2_g..lo.ln2_g + d],
                grad,
                lo.ln2_g,
                lo.ln2_b,
            );
            for c in 0..d {
                dx1[i * d + c] += dxn[c];
            }
        }

        // Attention block: x1 = x + Wo·attn(LN1(x))
        let mut dx0 = dx1.clone();
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for i in 0..t {
            let dout = &dx1[i * d..(i + 1) * d];
            outer_acc(grad, lo.wo, &la.y[i * d..(i + 1) * d], dout);
            let dy = matvec_t(&p[lo.wo..lo.wo + d * d], dout, d);
            let base = LayerActs::probs_offset(i, heads);
            for hh in 0..heads {
                let off = hh * dh;
                let probs = &la.probs[base + hh * (i + 1)..base + (hh + 1) * (i + 1)];
                let dyh = &dy[off..off + dh];
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &la.v[j * d + off..j * d + off + dh];
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += dyh[c] * vj[c];
                        dv[j * d + off + c] += probs[j] * dyh[c];
                    }
                    dp[j] = acc;
                }
                let dot: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &la.q[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let ds = probs[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &la.k[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kj[c];
                        dk[j * d + off + c] += ds * qi[c];
                    }
                }
            }
        }
        for i in 0..t {
            let a = &la.a[i * d..(i + 1) * d];
            let (dqi, dki, dvi) = (&dq[i * d..(i + 1) * d], &dk[i * d..(i + 1) * d], &dv[i * d..(i + 1) * d]);
            outer_acc(grad, lo.wq, a, dqi);
            outer_acc(grad, lo.wk, a, dki);
            outer_acc(grad, lo.wv, a, dvi);
            let mut da = matvec_t(&p[lo.wq..lo.wq + d * d], dqi, d);
            for (x, y) in da.iter_mut().zip(matvec_t(&p[lo.wk..lo.wk + d * d], dki, d)) {
                *x += y;
            }
            for (x, y) in da.iter_mut().zip(matvec_t(&p[lo.wv..lo.wv + d * d], dvi, d)) {
                *x += y;
            }
            let dxn = norm_backward(
                &da,
                &la.xhat1[i * d..(i + 1) * d],
                la.rstd1[i],
                &p[lo.ln1_g..lo.ln1_g + d],
                grad,
                lo.ln1_g,
                lo.ln1_b,
            );
            for c in 0..d {
                dx0[i * d + c] += dxn[c];
            }
        }
        dx = dx0;
    }

    for i in 0..t {
        let tok = acts.tokens[i].id();
        for c in 0..d {
            grad[lay.tok_emb + tok * d + c] += dx[i * d + c];
            grad[lay.pos_emb + i * d + c] += dx[i * d + c];
        }
    }
}
