//! Query encoders.
//!
//! The semantics booster turns a token-id query into a single vector:
//! token embedding plus learned position, one causal single-head attention
//! block, layer norm, a ReLU feed-forward network, and an element-wise
//! sigmoid gate averaged over positions. [`BowParams`] is the bag-of-words
//! fallback used when the booster is ablated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{
    self, layer_norm_rows, layer_norm_rows_backward, linear, linear_backward, relu, sigmoid,
    softmax_rows, softmax_rows_backward, LayerNormCache, MASK_VALUE,
};
use crate::nn::Parameters;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct BoosterParams {
    /// `[embed_dim × vocab_size]`; column `k` embeds token `k`.
    pub w_e: Tensor2,
    /// `[max_query_len × embed_dim]`
    pub pos: Tensor2,
    pub w_q: Tensor2,
    pub b_q: Tensor2,
    pub w_k: Tensor2,
    pub b_k: Tensor2,
    pub w_v: Tensor2,
    pub b_v: Tensor2,
    pub ln_gain: Tensor2,
    pub ln_bias: Tensor2,
    pub w_1: Tensor2,
    pub b_1: Tensor2,
    pub w_2: Tensor2,
    pub b_2: Tensor2,
    pub w_t: Tensor2,
    pub b_t: Tensor2,
}

impl BoosterParams {
    pub fn init<R: Rng + ?Sized>(
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        max_query_len: usize,
        ffn_width: usize,
        rng: &mut R,
    ) -> Self {
        let scaled = |rows, cols, rng: &mut R| {
            Tensor2::random_normal(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
        };
        Self {
            w_e: Tensor2::random_normal(embed_dim, vocab_size, 1.0, rng),
            pos: Tensor2::random_normal(max_query_len, embed_dim, 0.1, rng),
            w_q: scaled(hidden, embed_dim, rng),
            b_q: Tensor2::zeros(1, hidden),
            w_k: scaled(hidden, embed_dim, rng),
            b_k: Tensor2::zeros(1, hidden),
            w_v: scaled(hidden, embed_dim, rng),
            b_v: Tensor2::zeros(1, hidden),
            ln_gain: Tensor2::filled(1, hidden, 1.0),
            ln_bias: Tensor2::zeros(1, hidden),
            w_1: scaled(ffn_width, hidden, rng),
            b_1: Tensor2::zeros(1, ffn_width),
            w_2: scaled(hidden, ffn_width, rng),
            b_2: Tensor2::zeros(1, hidden),
            w_t: scaled(hidden, hidden, rng),
            b_t: Tensor2::zeros(1, hidden),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_e.cols()
    }

    pub fn max_query_len(&self) -> usize {
        self.pos.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows()
    }
}

impl Parameters for BoosterParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("booster.w_e", &self.w_e);
        f("booster.pos", &self.pos);
        f("booster.w_q", &self.w_q);
        f("booster.b_q", &self.b_q);
        f("booster.w_k", &self.w_k);
        f("booster.b_k", &self.b_k);
        f("booster.w_v", &self.w_v);
        f("booster.b_v", &self.b_v);
        f("booster.ln_gain", &self.ln_gain);
        f("booster.ln_bias", &self.ln_bias);
        f("booster.w_1", &self.w_1);
        f("booster.b_1", &self.b_1);
        f("booster.w_2", &self.w_2);
        f("booster.b_2", &self.b_2);
        f("booster.w_t", &self.w_t);
        f("booster.b_t", &self.b_t);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("booster.w_e", &mut self.w_e);
        f("booster.pos", &mut self.pos);
        f("booster.w_q", &mut self.w_q);
        f("booster.b_q", &mut self.b_q);
        f("booster.w_k", &mut self.w_k);
        f("booster.b_k", &mut self.b_k);
        f("booster.w_v", &mut self.w_v);
        f("booster.b_v", &mut self.b_v);
        f("booster.ln_gain", &mut self.ln_gain);
        f("booster.ln_bias", &mut self.ln_bias);
        f("booster.w_1", &mut self.w_1);
        f("booster.b_1", &mut self.b_1);
        f("booster.w_2", &mut self.w_2);
        f("booster.b_2", &mut self.b_2);
        f("booster.w_t", &mut self.w_t);
        f("booster.b_t", &mut self.b_t);
    }
}

/// `x_n = W_e[:, k_n] + P[n]` for every token.
pub fn embed_tokens(tokens: &[u32], params: &BoosterParams) -> Result<Tensor2> {
    if tokens.len() > params.max_query_len() {
        return Err(Error::invalid(format!(
            "query of {} tokens exceeds max length {}",
            tokens.len(),
            params.max_query_len()
        )));
    }
    let e = params.w_e.rows();
    let mut x = Tensor2::zeros(tokens.len(), e);
    for (n, &tok) in tokens.iter().enumerate() {
        let k = tok as usize;
        if k >= params.vocab_size() {
            return Err(Error::invalid(format!(
                "token id {k} outside vocabulary of {}",
                params.vocab_size()
            )));
        }
        for j in 0..e {
            x[(n, j)] = params.w_e[(j, k)] + params.pos[(n, j)];
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
    /// Row-stochastic attention weights `[N × N]`, zero above the diagonal.
    pub weights: Tensor2,
}

/// Single-head causal attention `softmax(mask(QKᵀ/√d_k))·V`, with `d_k` the hidden width.
pub fn masked_self_attention(x: &Tensor2, params: &BoosterParams) -> Result<(Tensor2, AttentionCache)> {
    if x.rows() == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    let q = linear(&params.w_q, params.b_q.as_slice(), x)?;
    let k = linear(&params.w_k, params.b_k.as_slice(), x)?;
    let v = linear(&params.w_v, params.b_v.as_slice(), x)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(&k)?;
    scores.scale(scale);
    let n = scores.rows();
    for i in 0..n {
        for j in i + 1..n {
            scores[(i, j)] += MASK_VALUE;
        }
    }
    let weights = softmax_rows(&scores);
    let out = weights.matmul(&v)?;
    Ok((out, AttentionCache { q, k, v, weights }))
}

/// Intermediate values of [`booster_encode`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BoosterForward {
    pub tokens: Vec<u32>,
    pub x: Tensor2,
    pub attn: AttentionCache,
    pub attn_out: Tensor2,
    pub ln_cache: LayerNormCache,
    pub z_norm: Tensor2,
    pub ffn_pre: Tensor2,
    pub ffn_hidden: Tensor2,
    /// `R_context`, `[N × hidden]`
    pub context: Tensor2,
    pub gate: Tensor2,
    pub z_ta: Vec<f64>,
}

/// Encodes a non-empty query into `(R_context, Z_ta)`.
///
/// Empty queries have no context; callers substitute the learned null-query
/// vector (see `model::QueryEncoder`).
pub fn booster_encode(tokens: &[u32], params: &BoosterParams) -> Result<BoosterForward> {
    if tokens.is_empty() {
        return Err(Error::invalid("booster_encode on an empty query"));
    }
    let x = embed_tokens(tokens, params)?;
    let (attn_out, attn) = masked_self_attention(&x, params)?;
    let (z_norm, ln_cache) =
        layer_norm_rows(&attn_out, params.ln_gain.as_slice(), params.ln_bias.as_slice())?;
    let ffn_pre = linear(&params.w_1, params.b_1.as_slice(), &z_norm)?;
    let ffn_hidden = ffn_pre.map(relu);
    let context = linear(&params.w_2, params.b_2.as_slice(), &ffn_hidden)?;
    let gate = linear(&params.w_t, params.b_t.as_slice(), &context)?.map(sigmoid);
    let n = tokens.len() as f64;
    let gated = gate.zip_map(&context, |g, r| g * r)?;
    let z_ta = gated.col_sums().into_iter().map(|s| s / n).collect();
    Ok(BoosterForward {
        tokens: tokens.to_vec(),
        x,
        attn,
        attn_out,
        ln_cache,
        z_norm,
        ffn_pre,
        ffn_hidden,
        context,
        gate,
        z_ta,
    })
}

/// Accumulates `∂L/∂params` into `grads` given `∂L/∂Z_ta`.
pub fn booster_backward(
    params: &BoosterParams,
    fwd: &BoosterForward,
    grad_z_ta: &[f64],
    grads: &mut BoosterParams,
) -> Result<()> {
    let (n, h) = fwd.context.shape();
    if grad_z_ta.len() != h {
        return Err(Error::shape("booster_backward", h, grad_z_ta.len()));
    }
    let inv_n = 1.0 / n as f64;

    // Z_ta = mean_n(G ⊙ R), G = σ(R·W_tᵀ + b_t)
    let mut d_context = Tensor2::zeros(n, h);
    let mut d_gate_pre = Tensor2::zeros(n, h);
    for i in 0..n {
        for j in 0..h {
            let dz = grad_z_ta[j] * inv_n;
            let g = fwd.gate[(i, j)];
            let r = fwd.context[(i, j)];
            d_context[(i, j)] = dz * g;
            d_gate_pre[(i, j)] = dz * r * g * (1.0 - g);
        }
    }
    let lt = linear_backward(&params.w_t, &fwd.context, &d_gate_pre)?;
    grads.w_t.add_assign(&lt.weight)?;
    ops::accumulate(grads.b_t.as_mut_slice(), &lt.bias);
    d_context.add_assign(&lt.input)?;

    // FFN
    let l2 = linear_backward(&params.w_2, &fwd.ffn_hidden, &d_context)?;
    grads.w_2.add_assign(&l2.weight)?;
    ops::accumulate(grads.b_2.as_mut_slice(), &l2.bias);
    let d_pre = l2.input.zip_map(&fwd.ffn_pre, |d, u| if u > 0.0 { d } else { 0.0 })?;
    let l1 = linear_backward(&params.w_1, &fwd.z_norm, &d_pre)?;
    grads.w_1.add_assign(&l1.weight)?;
    ops::accumulate(grads.b_1.as_mut_slice(), &l1.bias);

    let ln = layer_norm_rows_backward(&fwd.ln_cache, params.ln_gain.as_slice(), &l1.input)?;
    ops::accumulate(grads.ln_gain.as_mut_slice(), &ln.gain);
    ops::accumulate(grads.ln_bias.as_mut_slice(), &ln.bias);

    // O = A·V, A = softmax(S), S = QKᵀ/√d (+ constant mask)
    let d_out = ln.input;
    let a = &fwd.attn.weights;
    let d_a = d_out.matmul_t(&fwd.attn.v)?;
    let d_v = a.t_matmul(&d_out)?;
    let mut d_s = softmax_rows_backward(a, &d_a)?;
    d_s.scale(1.0 / (h as f64).sqrt());
    let d_q = d_s.matmul(&fwd.attn.k)?;
    let d_k = d_s.t_matmul(&fwd.attn.q)?;

    let mut d_x = Tensor2::zeros(fwd.x.rows(), fwd.x.cols());
    for (w, gw, gb, d) in [
        (&params.w_q, &mut grads.w_q, &mut grads.b_q, &d_q),
        (&params.w_k, &mut grads.w_k, &mut grads.b_k, &d_k),
        (&params.w_v, &mut grads.w_v, &mut grads.b_v, &d_v),
    ] {
        let l = linear_backward(w, &fwd.x, d)?;
        gw.add_assign(&l.weight)?;
        ops::accumulate(gb.as_mut_slice(), &l.bias);
        d_x.add_assign(&l.input)?;
    }

    for (pos, &tok) in fwd.tokens.iter().enumerate() {
        let k = tok as usize;
        for j in 0..d_x.cols() {
            let d = d_x[(pos, j)];
            grads.w_e[(j, k)] += d;
            grads.pos[(pos, j)] += d;
        }
    }
    Ok(())
}

/// Bag-of-words query projection: `Z_ta = counts·W_bowᵀ + b_bow`.
#[derive(Debug, Clone, PartialEq)]
pub struct BowParams {
    /// `[hidden × vocab_size]`
    pub w_bow: Tensor2,
    pub b_bow: Tensor2,
}

impl BowParams {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_bow: Tensor2::random_normal(hidden, vocab_size, 0.1, rng),
            b_bow: Tensor2::filled(1, hidden, 1.0),
        }
    }
}

impl Parameters for BowParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("bow.w", &self.w_bow);
        f("bow.b", &self.b_bow);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("bow.w", &mut self.w_bow);
        f("bow.b", &mut self.b_bow);
    }
}

/// Token histogram as a `[1 × vocab_size]` row.
pub fn bag_of_words(tokens: &[u32], vocab_size: usize) -> Result<Tensor2> {
    let mut counts = Tensor2::zeros(1, vocab_size);
    for &t in tokens {
        let k = t as usize;
        if k >= vocab_size {
            return Err(Error::invalid(format!(
                "token id {k} outside vocabulary of {vocab_size}"
            )));
        }
        counts[(0, k)] += 1.0;
    }
    Ok(counts)
}

pub fn bow_encode(tokens: &[u32], params: &BowParams) -> Result<(Tensor2, Vec<f64>)> {
    let counts = bag_of_words(tokens, params.w_bow.cols())?;
    let z = linear(&params.w_bow, params.b_bow.as_slice(), &counts)?;
    Ok((counts, z.into_vec()))
}

pub fn bow_backward(
    params: &BowParams,
    counts: &Tensor2,
    grad_z_ta: &[f64],
    grads: &mut BowParams,
) -> Result<()> {
    let l = linear_backward(&params.w_bow, counts, &Tensor2::row_vector(grad_z_ta))?;
    grads.w_bow.add_assign(&l.weight)?;
    ops::accumulate(grads.b_bow.as_mut_slice(), &l.bias);
    Ok(())
}
