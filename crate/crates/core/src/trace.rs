//! Per-token, per-layer residual stream snapshots of one (context, response)
//! pass.

use serde::{Deserialize, Serialize};

use crate::decoder::{ModelConfig, TokenRecord};
use crate::error::{Error, Result};

/// Which of the three residual taps of a layer to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Entering the layer.
    Pre,
    /// After the attention sublayer and its LayerNorm.
    Attn,
    /// After the FFN sublayer and its LayerNorm (the layer output).
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub response_len: usize,
    /// Earliest layer eligible for scoring.
    pub min_score_layer: usize,
    pub context_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
    /// Present when the trace came from the built-in decoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

impl TraceMeta {
    pub fn total_len(&self) -> usize {
        self.context_len + self.response_len
    }
}

/// Hidden states cover every position (context then response); attention
/// rows and log-probabilities cover response tokens only, and attention is
/// restricted to context positions.
///
/// All values are representable as `f32`, so a trace survives the binary
/// container unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub meta: TraceMeta,
    /// `[T][L][d]`
    pub x_pre: Vec<f64>,
    pub x_attn: Vec<f64>,
    pub x_post: Vec<f64>,
    /// `[N][L][H][C]`
    pub attn: Vec<f64>,
    /// `[N]`: log-probability of each response token given its prefix.
    pub token_logprob: Vec<f64>,
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

impl ResidualTrace {
    /// Builds a trace from decoder records of `context ++ response`.
    pub fn from_records(
        config: &ModelConfig,
        context: &[u32],
        response: &[u32],
        records: &[TokenRecord],
    ) -> Result<Self> {
        let c = context.len();
        let n = response.len();
        if records.len() != c + n {
            return Err(Error::invalid(format!(
                "{} records for {} tokens",
                records.len(),
                c + n
            )));
        }
        let (l_count, h_count, d) = (config.n_layers, config.n_heads, config.d_model);
        let mut x_pre = Vec::with_capacity((c + n) * l_count * d);
        let mut x_attn = Vec::with_capacity((c + n) * l_count * d);
        let mut x_post = Vec::with_capacity((c + n) * l_count * d);
        for r in records {
            for l in 0..l_count {
                x_pre.extend(r.x_pre[l].iter().copied().map(q));
                x_attn.extend(r.x_attn[l].iter().copied().map(q));
                x_post.extend(r.x_post[l].iter().copied().map(q));
            }
        }
        let mut attn = Vec::with_capacity(n * l_count * h_count * c);
        let mut token_logprob = Vec::with_capacity(n);
        for (i, &tok) in response.iter().enumerate() {
            let r = &records[c + i];
            for l in 0..l_count {
                for h in 0..h_count {
                    attn.extend(r.attn[l][h][..c].iter().copied().map(q));
                }
            }
            token_logprob.push(q(records[c + i - 1].next_logprobs[tok as usize]));
        }
        let trace = Self {
            meta: TraceMeta {
                n_layers: l_count,
                n_heads: h_count,
                d_model: d,
                context_len: c,
                response_len: n,
                min_score_layer: config.min_score_layer,
                context_ids: context.to_vec(),
                response_ids: response.to_vec(),
                model: Some(config.clone()),
            },
            x_pre,
            x_attn,
            x_post,
            attn,
            token_logprob,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Checks sizes, finiteness and attention row sanity.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let bad = |msg: String| Err(Error::Format(msg));
        if m.n_layers == 0 || m.n_heads == 0 || m.d_model == 0 {
            return bad("trace dimensions must be positive".into());
        }
        if m.context_len == 0 || m.response_len == 0 {
            return bad("trace needs a non-empty context and response".into());
        }
        if m.min_score_layer >= m.n_layers {
            return bad(format!(
                "min_score_layer {} not below n_layers {}",
                m.min_score_layer, m.n_layers
            ));
        }
        if m.context_ids.len() != m.context_len || m.response_ids.len() != m.response_len {
            return bad("token id lists disagree with declared lengths".into());
        }
        let hidden = m.total_len() * m.n_layers * m.d_model;
        for (name, v) in [("x_pre", &self.x_pre), ("x_attn", &self.x_attn), ("x_post", &self.x_post)] {
            if v.len() != hidden {
                return bad(format!("{name} has {} values, expected {hidden}", v.len()));
            }
        }
        let attn = m.response_len * m.n_layers * m.n_heads * m.context_len;
        if self.attn.len() != attn {
            return bad(format!("attn has {} values, expected {attn}", self.attn.len()));
        }
        if self.token_logprob.len() != m.response_len {
            return bad("token_logprob length disagrees with response_len".into());
        }
        let all = self
            .x_pre
            .iter()
            .chain(&self.x_attn)
            .chain(&self.x_post)
            .chain(&self.attn)
            .chain(&self.token_logprob);
        if !all.clone().all(|v| v.is_finite()) {
            return bad("non-finite value in trace".into());
        }
        for row in self.attn.chunks(m.context_len) {
            if row.iter().any(|&a| a < 0.0) || row.iter().sum::<f64>() > 1.0 + 1e-4 {
                return bad("attention row outside the probability simplex".into());
            }
        }
        if self.token_logprob.iter().any(|&lp| lp > 0.0) {
            return bad("positive token log-probability".into());
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.meta.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.meta.n_heads
    }

    pub fn context_len(&self) -> usize {
        self.meta.context_len
    }

    pub fn response_len(&self) -> usize {
        self.meta.response_len
    }

    /// Absolute position of response token `n`.
    pub fn response_position(&self, n: usize) -> usize {
        self.meta.context_len + n
    }

    /// Hidden state at absolute `position` and `layer`.
    pub fn hidden(&self, tap: Tap, position: usize, layer: usize) -> &[f64] {
        let d = self.meta.d_model;
        let start = (position * self.meta.n_layers + layer) * d;
        let src = match tap {
            Tap::Pre => &self.x_pre,
            Tap::Attn => &self.x_attn,
            Tap::Post => &self.x_post,
        };
        &src[start..start + d]
    }

    /// Attention of response token `n` over the context, for `(layer, head)`.
    pub fn attn_row(&self, n: usize, layer: usize, head: usize) -> &[f64] {
        let m = &self.meta;
        let start = ((n * m.n_layers + layer) * m.n_heads + head) * m.context_len;
        &self.attn[start..start + m.context_len]
    }

    /// Copy restricted to the first `len` response tokens.
    pub fn truncate_response(&self, len: usize) -> Result<Self> {
        let m = &self.meta;
        if len == 0 || len > m.response_len {
            return Err(Error::invalid(format!("cannot truncate to {len} tokens")));
        }
        let per_pos = m.n_layers * m.d_model;
        let per_tok = m.n_layers * m.n_heads * m.context_len;
        let hidden_end = (m.context_len + len) * per_pos;
        let mut meta = m.clone();
        meta.response_len = len;
        meta.response_ids.truncate(len);
        Ok(Self {
            meta,
            x_pre: self.x_pre[..hidden_end].to_vec(),
            x_attn: self.x_attn[..hidden_end].to_vec(),
            x_post: self.x_post[..hidden_end].to_vec(),
            attn: self.attn[..len * per_tok].to_vec(),
            token_logprob: self.token_logprob[..len].to_vec(),
        })
    }
}
