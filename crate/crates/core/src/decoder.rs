//! A small post-norm decoder-only transformer, instrumented for residual
//! stream analysis.
//!
//! Per layer `l` and position `n` the forward pass computes
//!
//! ```text
//! a_n^{l,h}  = softmax((x_n W_Q^h)(X_{<=n} W_K^{g(h)})^T / scale)
//! attn_n     = sum_h sum_j a_{n,j}^{l,h} x_j W_V^{g(h)} W_O^h
//! x_attn     = LayerNorm(x_n + attn_n)
//! x_post     = LayerNorm(x_attn + W_2 ReLU(W_1 x_attn + b_1) + b_2)
//! ```
//!
//! where `g(h)` is the shared key/value head of query head `h` and `scale`
//! is `sqrt(d_head / n_heads)` unless `conventional_scale` selects
//! `sqrt(d_head)`. Vocabulary distributions are `softmax(W_o x + b_o)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, softmax, softmax_unchecked, Matrix, ProbVec};
use crate::trace::ResidualTrace;

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-10;

/// Default beam length penalty.
pub const DEFAULT_LENGTH_PENALTY: f64 = 0.8;

/// Magnitude bound of [`random_model`] weights.
pub const RANDOM_WEIGHT_BOUND: f64 = 0.08;

/// Earliest layer eligible for scoring, scaled from "after layer 9 of 32".
pub fn scaled_layer_floor(n_layers: usize) -> usize {
    let floor = (n_layers * 9).div_ceil(32);
    floor.min(n_layers.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Query heads per shared key/value head.
    pub kv_group: usize,
    /// Layers below this index are never scored.
    pub min_score_layer: usize,
    /// Length of the learned absolute position table.
    pub max_positions: usize,
    /// Use `sqrt(d_head)` as the attention scale instead of `sqrt(d_head / n_heads)`.
    #[serde(default)]
    pub conventional_scale: bool,
}

impl ModelConfig {
    /// A config with `d_head = d_model / n_heads`, `d_ff = 2 d_model` and the
    /// proportionally scaled scoring floor.
    pub fn toy(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_ff: 2 * d_model,
            vocab_size,
            kv_group: 1,
            min_score_layer: scaled_layer_floor(n_layers),
            max_positions: 128,
            conventional_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_head and d_ff must be positive".into());
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return fail("vocab_size and max_positions must be positive".into());
        }
        if self.kv_group == 0 || !self.n_heads.is_multiple_of(self.kv_group) {
            return fail(format!(
                "n_heads {} is not a multiple of kv_group {}",
                self.n_heads, self.kv_group
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.min_score_layer >= self.n_layers {
            return fail(format!(
                "min_score_layer {} must be below n_layers {}",
                self.min_score_layer, self.n_layers
            ));
        }
        Ok(())
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_heads / self.kv_group
    }

    #[inline]
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.kv_group
    }

    pub fn attention_scale(&self) -> f64 {
        if self.conventional_scale {
            (self.d_head as f64).sqrt()
        } else {
            (self.d_head as f64 / self.n_heads as f64).sqrt()
        }
    }

    /// Layers at or above the scoring floor.
    pub fn scoring_layers(&self) -> std::ops::Range<usize> {
        self.min_score_layer..self.n_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Per query head, `d_model x d_head`.
    pub wq: Vec<Matrix>,
    /// Per key/value head, `d_model x d_head`.
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// Per query head, `d_head x d_model`.
    pub wo: Vec<Matrix>,
    /// `d_ff x d_model`
    pub ffn1: Matrix,
    pub b1: Vec<f64>,
    /// `d_model x d_ff`
    pub ffn2: Matrix,
    pub b2: Vec<f64>,
    /// LayerNorm gain/shift; index 0 follows attention, 1 follows the FFN.
    pub ln_g: [Vec<f64>; 2],
    pub ln_b: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// `vocab x d_model`
    pub emb: Matrix,
    /// `max_positions x d_model`
    pub pos: Matrix,
    /// `vocab x d_model`
    pub unemb: Matrix,
    pub unemb_bias: Vec<f64>,
}

impl DecoderWeights {
    /// All-zero weights with identity LayerNorm parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let layer = LayerWeights {
            wq: vec![Matrix::zeros(c.d_model, c.d_head); c.n_heads],
            wk: vec![Matrix::zeros(c.d_model, c.d_head); c.n_kv_heads()],
            wv: vec![Matrix::zeros(c.d_model, c.d_head); c.n_kv_heads()],
            wo: vec![Matrix::zeros(c.d_head, c.d_model); c.n_heads],
            ffn1: Matrix::zeros(c.d_ff, c.d_model),
            b1: vec![0.0; c.d_ff],
            ffn2: Matrix::zeros(c.d_model, c.d_ff),
            b2: vec![0.0; c.d_model],
            ln_g: [vec![1.0; c.d_model], vec![1.0; c.d_model]],
            ln_b: [vec![0.0; c.d_model], vec![0.0; c.d_model]],
        };
        Ok(Self {
            layers: vec![layer; c.n_layers],
            emb: Matrix::zeros(c.vocab_size, c.d_model),
            pos: Matrix::zeros(c.max_positions, c.d_model),
            unemb: Matrix::zeros(c.vocab_size, c.d_model),
            unemb_bias: vec![0.0; c.vocab_size],
            config,
        })
    }

    /// Checks every shape against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: &str| Err(Error::Format(format!("weight shape mismatch: {what}")));
        if self.layers.len() != c.n_layers {
            return bad("layer count");
        }
        if self.emb.shape() != (c.vocab_size, c.d_model) {
            return bad("emb");
        }
        if self.pos.shape() != (c.max_positions, c.d_model) {
            return bad("pos");
        }
        if self.unemb.shape() != (c.vocab_size, c.d_model) || self.unemb_bias.len() != c.vocab_size
        {
            return bad("unemb");
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let ok = lw.wq.len() == c.n_heads
                && lw.wo.len() == c.n_heads
                && lw.wk.len() == c.n_kv_heads()
                && lw.wv.len() == c.n_kv_heads()
                && lw.wq.iter().chain(&lw.wk).chain(&lw.wv).all(|m| m.shape() == (c.d_model, c.d_head))
                && lw.wo.iter().all(|m| m.shape() == (c.d_head, c.d_model))
                && lw.ffn1.shape() == (c.d_ff, c.d_model)
                && lw.ffn2.shape() == (c.d_model, c.d_ff)
                && lw.b1.len() == c.d_ff
                && lw.b2.len() == c.d_model
                && lw.ln_g.iter().chain(&lw.ln_b).all(|v| v.len() == c.d_model);
            if !ok {
                return bad(&format!("layer {l}"));
            }
        }
        if !self.all_finite() {
            return Err(Error::Format("non-finite weight".into()));
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        let vecs_ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.emb.is_finite()
            && self.pos.is_finite()
            && self.unemb.is_finite()
            && vecs_ok(&self.unemb_bias)
            && self.layers.iter().all(|l| {
                l.wq.iter().chain(&l.wk).chain(&l.wv).chain(&l.wo).all(Matrix::is_finite)
                    && l.ffn1.is_finite()
                    && l.ffn2.is_finite()
                    && vecs_ok(&l.b1)
                    && vecs_ok(&l.b2)
                    && l.ln_g.iter().chain(&l.ln_b).all(|v| vecs_ok(v))
            })
    }

    /// Rounds every parameter to the nearest `f32`, so that the weights
    /// survive a container round-trip unchanged.
    pub fn quantize_f32(&mut self) {
        fn q(v: &mut [f64]) {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        q(self.emb.data_mut());
        q(self.pos.data_mut());
        q(self.unemb.data_mut());
        q(&mut self.unemb_bias);
        for l in &mut self.layers {
            for m in l.wq.iter_mut().chain(&mut l.wk).chain(&mut l.wv).chain(&mut l.wo) {
                q(m.data_mut());
            }
            q(l.ffn1.data_mut());
            q(l.ffn2.data_mut());
            q(&mut l.b1);
            q(&mut l.b2);
            for v in l.ln_g.iter_mut().chain(&mut l.ln_b) {
                q(v);
            }
        }
    }

    /// Input representation `emb[token] + pos[position]`.
    pub fn embed(&self, token: u32, position: usize) -> Result<Vec<f64>> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::invalid(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if position >= self.config.max_positions {
            return Err(Error::invalid(format!(
                "position {position} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(self
            .emb
            .row(t)
            .iter()
            .zip(self.pos.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Vocabulary logits `W_o x + b_o`.
    pub fn lens_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.d_model {
            return Err(Error::invalid(format!(
                "hidden state has length {}, expected {}",
                x.len(),
                self.config.d_model
            )));
        }
        let mut logits = self.unemb.matvec(x);
        for (l, b) in logits.iter_mut().zip(&self.unemb_bias) {
            *l += b;
        }
        Ok(logits)
    }

    /// Returns a copy with the FFN of each listed layer producing exactly zero.
    pub fn with_ffn_erased(&self, layers: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for &l in layers {
            let lw = out
                .layers
                .get_mut(l)
                .ok_or_else(|| Error::invalid(format!("layer {l} out of range")))?;
            lw.ffn1.scale(0.0);
            lw.ffn2.scale(0.0);
            lw.b1.iter_mut().for_each(|b| *b = 0.0);
            lw.b2.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(out)
    }
}

/// Logit lens: the vocabulary distribution read from a hidden state.
pub fn logit_lens(x: &[f64], weights: &DecoderWeights) -> Result<ProbVec> {
    softmax(&weights.lens_logits(x)?)
}

/// LayerNorm over one vector with gain `g` and shift `b`.
pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mean) * inv * gi + bi)
        .collect()
}

/// Attention weights of the last row of `prefix` over all rows of `prefix`
/// for head `head` of layer `layer`.
pub fn attention_weights(
    prefix: &Matrix,
    weights: &DecoderWeights,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let c = &weights.config;
    if prefix.rows() == 0 {
        return Err(Error::invalid("empty prefix"));
    }
    if prefix.cols() != c.d_model {
        return Err(Error::invalid(format!(
            "prefix width {} != d_model {}",
            prefix.cols(),
            c.d_model
        )));
    }
    if layer >= c.n_layers || head >= c.n_heads {
        return Err(Error::invalid(format!("no head ({layer}, {head})")));
    }
    let lw = &weights.layers[layer];
    let q = lw.wq[head].vecmat(prefix.row(prefix.rows() - 1));
    let wk = &lw.wk[c.kv_head_of(head)];
    let scale = c.attention_scale();
    let logits: Vec<f64> = (0..prefix.rows())
        .map(|j| dot(&q, &wk.vecmat(prefix.row(j))) / scale)
        .collect();
    Ok(softmax_unchecked(&logits))
}

/// Gaussian noise on pre-softmax attention logits. Rows are renormalized by
/// the softmax that follows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionNoise {
    pub sigma: f64,
    pub seed: u64,
}

impl AttentionNoise {
    /// Noise for the query at `position`, layer `layer`, head `head`, over
    /// `len` key positions. The stream depends only on these coordinates.
    pub fn sample(&self, position: usize, layer: usize, head: usize, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.seed,
            position as u64,
            layer as u64,
            head as u64,
        ]));
        let normal = Normal::new(0.0, self.sigma).expect("sigma is finite and non-negative");
        (0..len).map(|_| normal.sample(&mut rng)).collect()
    }
}

/// SplitMix-style mixing of several words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Runtime modifications applied inside the forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    /// Multiplier on a head's contribution to the residual, keyed by `(layer, head)`.
    pub head_scale: BTreeMap<(usize, usize), f64>,
    /// Multiplier on a layer's FFN output.
    pub ffn_scale: BTreeMap<usize, f64>,
    pub attn_noise: Option<AttentionNoise>,
}

impl Hooks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.head_scale.values().all(|s| *s == 1.0)
            && self.ffn_scale.values().all(|s| *s == 1.0)
            && self.attn_noise.is_none_or(|n| n.sigma == 0.0)
    }
}

/// Everything computed for one position in one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub position: usize,
    /// Per layer, the residual entering the layer.
    pub x_pre: Vec<Vec<f64>>,
    /// Per layer, the residual after the attention sublayer and its LayerNorm.
    pub x_attn: Vec<Vec<f64>>,
    /// Per layer, the residual after the FFN sublayer and its LayerNorm.
    pub x_post: Vec<Vec<f64>>,
    /// `[layer][head]`: full causal attention row over positions `0..=position`.
    pub attn: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]`: each head's (possibly scaled) contribution before LayerNorm.
    pub head_out: Vec<Vec<Vec<f64>>>,
    /// Per layer, the (possibly scaled) FFN output before LayerNorm.
    pub ffn_out: Vec<Vec<f64>>,
    /// Next-token distribution.
    pub next: ProbVec,
    /// Log-probabilities matching `next`, computed without rounding through `next`.
    pub next_logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct KvRows {
    /// `[layer][kv_head]`
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

/// Incremental decoding state: cached keys and values of every processed
/// position.
#[derive(Debug, Clone)]
pub struct DecoderState<'w> {
    weights: &'w DecoderWeights,
    /// `[layer][kv_head][position]`
    keys: Vec<Vec<Vec<Vec<f64>>>>,
    values: Vec<Vec<Vec<Vec<f64>>>>,
    len: usize,
}

impl<'w> DecoderState<'w> {
    pub fn new(weights: &'w DecoderWeights) -> Self {
        let c = &weights.config;
        Self {
            weights,
            keys: vec![vec![Vec::new(); c.n_kv_heads()]; c.n_layers],
            values: vec![vec![Vec::new(); c.n_kv_heads()]; c.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weights(&self) -> &'w DecoderWeights {
        self.weights
    }

    /// Computes the next position without committing it to the cache.
    pub fn peek(&self, token: u32, hooks: &Hooks) -> Result<TokenRecord> {
        Ok(self.compute(token, hooks)?.0)
    }

    /// Computes and commits the next position.
    pub fn push(&mut self, token: u32, hooks: &Hooks) -> Result<TokenRecord> {
        let (rec, kv) = self.compute(token, hooks)?;
        for (l, (ks, vs)) in kv.keys.into_iter().zip(kv.values).enumerate() {
            for (g, (k, v)) in ks.into_iter().zip(vs).enumerate() {
                self.keys[l][g].push(k);
                self.values[l][g].push(v);
            }
        }
        self.len += 1;
        Ok(rec)
    }

    fn compute(&self, token: u32, hooks: &Hooks) -> Result<(TokenRecord, KvRows)> {
        let w = self.weights;
        let c = &w.config;
        let n = self.len;
        let mut x = w.embed(token, n)?;
        let scale = c.attention_scale();

        let mut rec = TokenRecord {
            position: n,
            x_pre: Vec::with_capacity(c.n_layers),
            x_attn: Vec::with_capacity(c.n_layers),
            x_post: Vec::with_capacity(c.n_layers),
            attn: Vec::with_capacity(c.n_layers),
            head_out: Vec::with_capacity(c.n_layers),
            ffn_out: Vec::with_capacity(c.n_layers),
            next: ProbVec::uniform(1)?,
            next_logprobs: Vec::new(),
        };
        let mut kv = KvRows {
            keys: Vec::with_capacity(c.n_layers),
            values: Vec::with_capacity(c.n_layers),
        };

        for (l, lw) in w.layers.iter().enumerate() {
            let new_k: Vec<Vec<f64>> = lw.wk.iter().map(|m| m.vecmat(&x)).collect();
            let new_v: Vec<Vec<f64>> = lw.wv.iter().map(|m| m.vecmat(&x)).collect();

            let mut attn_sum = vec![0.0; c.d_model];
            let mut rows = Vec::with_capacity(c.n_heads);
            let mut outs = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let g = c.kv_head_of(h);
                let q = lw.wq[h].vecmat(&x);
                let cached_k = &self.keys[l][g];
                let mut logits: Vec<f64> = cached_k
                    .iter()
                    .chain(std::iter::once(&new_k[g]))
                    .map(|k| dot(&q, k) / scale)
                    .collect();
                if let Some(noise) = hooks.attn_noise.filter(|n| n.sigma > 0.0) {
                    for (lg, e) in logits.iter_mut().zip(noise.sample(n, l, h, n + 1)) {
                        *lg += e;
                    }
                }
                let a = softmax_unchecked(&logits);
                let mut head_val = vec![0.0; c.d_head];
                for (aj, v) in a
                    .iter()
                    .zip(self.values[l][g].iter().chain(std::iter::once(&new_v[g])))
                {
                    for (o, vi) in head_val.iter_mut().zip(v) {
                        *o += aj * vi;
                    }
                }
                let mut contrib = lw.wo[h].vecmat(&head_val);
                if let Some(&s) = hooks.head_scale.get(&(l, h)) {
                    contrib.iter_mut().for_each(|v| *v *= s);
                }
                for (s, v) in attn_sum.iter_mut().zip(&contrib) {
                    *s += v;
                }
                rows.push(a);
                outs.push(contrib);
            }

            let resid: Vec<f64> = x.iter().zip(&attn_sum).map(|(a, b)| a + b).collect();
            let x_attn = layer_norm(&resid, &lw.ln_g[0], &lw.ln_b[0]);

            let mut ffn = ffn_forward(lw, &x_attn);
            if let Some(&s) = hooks.ffn_scale.get(&l) {
                ffn.iter_mut().for_each(|v| *v *= s);
            }
            let resid: Vec<f64> = x_attn.iter().zip(&ffn).map(|(a, b)| a + b).collect();
            let x_post = layer_norm(&resid, &lw.ln_g[1], &lw.ln_b[1]);

            rec.x_pre.push(std::mem::replace(&mut x, x_post.clone()));
            rec.x_attn.push(x_attn);
            rec.x_post.push(x_post);
            rec.attn.push(rows);
            rec.head_out.push(outs);
            rec.ffn_out.push(ffn);
            kv.keys.push(new_k);
            kv.values.push(new_v);
        }

        let logits = w.lens_logits(&x)?;
        let lse = log_sum_exp(&logits);
        rec.next_logprobs = logits.iter().map(|l| l - lse).collect();
        rec.next = softmax(&logits)?;
        Ok((rec, kv))
    }
}

/// `W_2 ReLU(W_1 x + b_1) + b_2`
pub fn ffn_forward(lw: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let mut hidden = lw.ffn1.matvec(x);
    for (h, b) in hidden.iter_mut().zip(&lw.b1) {
        *h = (*h + b).max(0.0);
    }
    let mut out = lw.ffn2.matvec(&hidden);
    for (o, b) in out.iter_mut().zip(&lw.b2) {
        *o += b;
    }
    out
}

/// Runs `tokens` through the decoder and returns one record per position.
pub fn forward_sequence(
    weights: &DecoderWeights,
    tokens: &[u32],
    hooks: &Hooks,
) -> Result<Vec<TokenRecord>> {
    let mut state = DecoderState::new(weights);
    tokens.iter().map(|&t| state.push(t, hooks)).collect()
}

/// Teacher-forced trace of `context` followed by `response`.
pub fn trace_sequence(
    weights: &DecoderWeights,
    context: &[u32],
    response: &[u32],
    hooks: &Hooks,
) -> Result<ResidualTrace> {
    if context.is_empty() || response.is_empty() {
        return Err(Error::invalid("context and response must be non-empty"));
    }
    let tokens: Vec<u32> = context.iter().chain(response).copied().collect();
    let records = forward_sequence(weights, &tokens, hooks)?;
    ResidualTrace::from_records(&weights.config, context, response, &records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize, length_penalty: f64 },
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    /// Generation for a beam stops when this token is emitted.
    #[serde(default)]
    pub eos_token: Option<u32>,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens,
            eos_token: None,
        }
    }

    pub fn beam(width: usize, length_penalty: f64, max_new_tokens: usize) -> Self {
        Self {
            mode: DecodeMode::Beam {
                width,
                length_penalty,
            },
            max_new_tokens,
            eos_token: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    /// Conditional probability of each emitted token.
    pub probs: Vec<f64>,
    pub trace: ResidualTrace,
    /// `(1 / L^alpha) * sum log P`; alpha is the beam length penalty, and 0
    /// for greedy and sampled decoding.
    pub score: f64,
}

/// Length-normalized sequence score.
pub fn normalized_score(sum_logprob: f64, len: usize, length_penalty: f64) -> f64 {
    sum_logprob / (len as f64).powf(length_penalty)
}

/// Decodes a continuation of `prompt`.
pub fn generate(
    weights: &DecoderWeights,
    prompt: &[u32],
    opts: &GenerateOptions,
    hooks: &Hooks,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    if opts.max_new_tokens == 0 {
        return Err(Error::invalid("max_new_tokens must be at least 1"));
    }
    if prompt.len() + opts.max_new_tokens > weights.config.max_positions {
        return Err(Error::invalid(format!(
            "prompt of {} plus {} new tokens exceeds max_positions {}",
            prompt.len(),
            opts.max_new_tokens,
            weights.config.max_positions
        )));
    }
    let (tokens, alpha) = match opts.mode {
        DecodeMode::Greedy => (decode_greedy(weights, prompt, opts, hooks)?, 0.0),
        DecodeMode::Beam {
            width,
            length_penalty,
        } => {
            if width == 0 {
                return Err(Error::invalid("beam width must be at least 1"));
            }
            (
                decode_beam(weights, prompt, opts, width, length_penalty, hooks)?,
                length_penalty,
            )
        }
        DecodeMode::Sample { temperature, seed } => {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::invalid("temperature must be positive"));
            }
            (decode_sample(weights, prompt, opts, temperature, seed, hooks)?, 0.0)
        }
    };
    let trace = trace_sequence(weights, prompt, &tokens, hooks)?;
    let logprobs: Vec<f64> = trace.token_logprob.clone();
    let probs = logprobs.iter().map(|l| l.exp()).collect();
    let score = normalized_score(logprobs.iter().sum(), tokens.len(), alpha);
    Ok(GenerationResult {
        tokens,
        probs,
        trace,
        score,
    })
}

fn prime<'w>(weights: &'w DecoderWeights, prompt: &[u32], hooks: &Hooks) -> Result<(DecoderState<'w>, TokenRecord)> {
    let mut state = DecoderState::new(weights);
    let mut last = None;
    for &t in prompt {
        last = Some(state.push(t, hooks)?);
    }
    Ok((state, last.expect("prompt is non-empty")))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn decode_greedy(
    weights: &DecoderWeights,
    prompt: &[u32],
    opts: &GenerateOptions,
    hooks: &Hooks,
) -> Result<Vec<u32>> {
    let (mut state, mut last) = prime(weights, prompt, hooks)?;
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        let tok = argmax(&last.next_logprobs) as u32;
        out.push(tok);
        if Some(tok) == opts.eos_token || out.len() == opts.max_new_tokens {
            break;
        }
        last = state.push(tok, hooks)?;
    }
    Ok(out)
}

fn decode_sample(
    weights: &DecoderWeights,
    prompt: &[u32],
    opts: &GenerateOptions,
    temperature: f64,
    seed: u64,
    hooks: &Hooks,
) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut last) = prime(weights, prompt, hooks)?;
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        let scaled: Vec<f64> = last.next_logprobs.iter().map(|l| l / temperature).collect();
        let probs = softmax_unchecked(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i;
                break;
            }
        }
        let tok = tok as u32;
        out.push(tok);
        if Some(tok) == opts.eos_token || out.len() == opts.max_new_tokens {
            break;
        }
        last = state.push(tok, hooks)?;
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam<'w> {
    tokens: Vec<u32>,
    sum: f64,
    state: DecoderState<'w>,
    next_logprobs: Vec<f64>,
}

fn decode_beam(
    weights: &DecoderWeights,
    prompt: &[u32],
    opts: &GenerateOptions,
    width: usize,
    length_penalty: f64,
    hooks: &Hooks,
) -> Result<Vec<u32>> {
    let (state, last) = prime(weights, prompt, hooks)?;
    let mut active = vec![Beam {
        tokens: Vec::new(),
        sum: 0.0,
        state,
        next_logprobs: last.next_logprobs,
    }];
    let mut completed: Vec<(Vec<u32>, f64)> = Vec::new();

    while !active.is_empty() {
        // (beam index, token, cumulative score); stable order breaks ties
        // toward earlier beams and lower token ids
        let mut cands: Vec<(usize, u32, f64)> = Vec::new();
        for (b, beam) in active.iter().enumerate() {
            for (t, lp) in beam.next_logprobs.iter().enumerate() {
                cands.push((b, t as u32, beam.sum + lp));
            }
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2));
        cands.truncate(width);

        let mut next = Vec::with_capacity(cands.len());
        for (b, tok, sum) in cands {
            let mut tokens = active[b].tokens.clone();
            tokens.push(tok);
            if Some(tok) == opts.eos_token || tokens.len() == opts.max_new_tokens {
                completed.push((tokens, sum));
                continue;
            }
            let mut state = active[b].state.clone();
            let rec = state.push(tok, hooks)?;
            next.push(Beam {
                tokens,
                sum,
                state,
                next_logprobs: rec.next_logprobs,
            });
        }
        active = next;
    }

    let mut best: Option<(Vec<u32>, f64)> = None;
    for (tokens, sum) in completed {
        let s = normalized_score(sum, tokens.len(), length_penalty);
        if best.as_ref().is_none_or(|(_, bs)| s > *bs) {
            best = Some((tokens, s));
        }
    }
    Ok(best.expect("beam search always completes at least one sequence").0)
}

/// Reproducible weights drawn uniformly from `[-0.08, 0.08]` with identity
/// LayerNorm parameters.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<DecoderWeights> {
    let mut w = DecoderWeights::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = RANDOM_WEIGHT_BOUND;
    let mut fill = |v: &mut [f64]| {
        for x in v.iter_mut() {
            *x = rng.random_range(-bound..=bound);
        }
    };
    fill(w.emb.data_mut());
    fill(w.pos.data_mut());
    fill(w.unemb.data_mut());
    fill(&mut w.unemb_bias);
    for l in &mut w.layers {
        for m in l.wq.iter_mut().chain(&mut l.wk).chain(&mut l.wv).chain(&mut l.wo) {
            fill(m.data_mut());
        }
        fill(l.ffn1.data_mut());
        fill(l.ffn2.data_mut());
        fill(&mut l.b1);
        fill(&mut l.b2);
    }
    w.quantize_f32();
    Ok(w)
}
