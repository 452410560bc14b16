//! Attention-pooled external context scores (ECS), logit-lens parametric
//! knowledge scores (PKS), their regression combination, chunk-level
//! variants, candidate selection and generation-time mitigation.

use serde::{Deserialize, Serialize};

use crate::decoder::{
    logit_lens, DecoderState, DecoderWeights, Hooks, TokenRecord,
};
use crate::error::{Error, Result};
use crate::tensor::{cosine, jsd, mean, pearson};
use crate::trace::{ResidualTrace, Tap};

pub const DEFAULT_K_PERCENT: f64 = 10.0;
pub const DEFAULT_CHUNK_SIZE: usize = 16;

/// Attention amplification / FFN suppression applied once a token's score
/// exceeds `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
}

impl Mitigation {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 1.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must exceed 1, got {}", self.mu)));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::Config(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        Ok(())
    }
}

fn default_k() -> f64 {
    DEFAULT_K_PERCENT
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK_SIZE
}

/// Coefficients and selected components of the regression score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub alpha: f64,
    pub beta: f64,
    /// FFN layers contributing the parametric term.
    pub ffn_layers: Vec<usize>,
    /// `(layer, head)` pairs contributing the context term.
    pub copy_heads: Vec<(usize, usize)>,
    #[serde(default = "default_k")]
    pub k_percent: f64,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    /// Layer whose hidden states embed chunks; the final layer when unset.
    #[serde(default)]
    pub chunk_layer: Option<usize>,
    #[serde(default)]
    pub mitigation: Option<Mitigation>,
}

impl RegressionConfig {
    pub fn new(alpha: f64, beta: f64, ffn_layers: Vec<usize>, copy_heads: Vec<(usize, usize)>) -> Self {
        Self {
            alpha,
            beta,
            ffn_layers,
            copy_heads,
            k_percent: DEFAULT_K_PERCENT,
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_layer: None,
            mitigation: None,
        }
    }

    /// Checks coefficients, selections against a model of `n_layers` x
    /// `n_heads` with scoring floor `min_layer`, and the mitigation block.
    pub fn validate(&self, n_layers: usize, n_heads: usize, min_layer: usize) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        if self.ffn_layers.is_empty() || self.copy_heads.is_empty() {
            return Err(Error::Config("ffn_layers and copy_heads must be non-empty".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!(
                "k_percent must lie in (0, 100], got {}",
                self.k_percent
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        for &l in &self.ffn_layers {
            if l < min_layer || l >= n_layers {
                return Err(Error::Config(format!(
                    "FFN layer {l} outside scoring range {min_layer}..{n_layers}"
                )));
            }
        }
        for &(l, h) in &self.copy_heads {
            if l < min_layer || l >= n_layers || h >= n_heads {
                return Err(Error::Config(format!(
                    "head ({l}, {h}) outside scoring range {min_layer}..{n_layers} x {n_heads}"
                )));
            }
        }
        if let Some(cl) = self.chunk_layer {
            if cl >= n_layers {
                return Err(Error::Config(format!("chunk_layer {cl} out of range")));
            }
        }
        if let Some(m) = &self.mitigation {
            m.validate()?;
        }
        Ok(())
    }

    pub fn validate_for(&self, trace: &ResidualTrace) -> Result<()> {
        self.validate(trace.n_layers(), trace.n_heads(), trace.meta.min_score_layer)
    }

    /// Hooks that scale the selected heads by `mu` and FFN layers by `nu`.
    pub fn mitigation_hooks(&self) -> Result<Hooks> {
        let m = self
            .mitigation
            .ok_or_else(|| Error::Config("no mitigation configured".into()))?;
        m.validate()?;
        let mut hooks = Hooks::none();
        for &key in &self.copy_heads {
            hooks.head_scale.insert(key, m.mu);
        }
        for &l in &self.ffn_layers {
            hooks.ffn_scale.insert(l, m.nu);
        }
        Ok(hooks)
    }
}

/// Number of attended positions for a context of `len` tokens.
pub fn attended_count(len: usize, k_percent: f64) -> usize {
    // the small slack keeps e.g. 10% of 30 from rounding up to 4
    let raw = (k_percent / 100.0 * len as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(len)
}

/// Indices of the top `ceil(k% * len)` attention weights (at least one),
/// ties broken toward the lower index, returned sorted ascending.
pub fn attended_tokens(attn_row: &[f64], k_percent: f64) -> Result<Vec<usize>> {
    if attn_row.is_empty() {
        return Err(Error::invalid("empty context"));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let k = attended_count(attn_row.len(), k_percent);
    let mut idx: Vec<usize> = (0..attn_row.len()).collect();
    // stable sort keeps lower indices first among equal weights
    idx.sort_by(|&a, &b| attn_row[b].total_cmp(&attn_row[a]));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Cosine between the mean of attended context states and the token's own
/// state, both taken after layer `layer`.
pub fn ecs(trace: &ResidualTrace, n: usize, layer: usize, head: usize, k_percent: f64) -> Result<f64> {
    check_indices(trace, n, layer, Some(head))?;
    let set = attended_tokens(trace.attn_row(n, layer, head), k_percent)?;
    let d = trace.meta.d_model;
    let mut pooled = vec![0.0; d];
    for &j in &set {
        for (p, v) in pooled.iter_mut().zip(trace.hidden(Tap::Post, j, layer)) {
            *p += v;
        }
    }
    let inv = 1.0 / set.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    cosine(&pooled, trace.hidden(Tap::Post, trace.response_position(n), layer))
}

/// JSD (bits) between the lens distributions before and after layer
/// `layer`'s FFN.
pub fn pks(trace: &ResidualTrace, weights: &DecoderWeights, n: usize, layer: usize) -> Result<f64> {
    check_indices(trace, n, layer, None)?;
    let pos = trace.response_position(n);
    let before = logit_lens(trace.hidden(Tap::Attn, pos, layer), weights)?;
    let after = logit_lens(trace.hidden(Tap::Post, pos, layer), weights)?;
    jsd(&before, &after)
}

fn check_indices(trace: &ResidualTrace, n: usize, layer: usize, head: Option<usize>) -> Result<()> {
    if n >= trace.response_len() {
        return Err(Error::invalid(format!("response token {n} out of range")));
    }
    if layer >= trace.n_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    if head.is_some_and(|h| h >= trace.n_heads()) {
        return Err(Error::invalid(format!("head {head:?} out of range")));
    }
    Ok(())
}

/// Per-token parametric and context terms of the regression score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// `alpha * sum_F` term per token.
    pub param_terms: Vec<f64>,
    /// `beta * sum_A` term per token (subtracted).
    pub context_terms: Vec<f64>,
    /// `param - context` per token.
    pub tokens: Vec<f64>,
    /// Mean over tokens.
    pub score: f64,
}

impl ScoreBreakdown {
    pub(crate) fn from_terms(param_terms: Vec<f64>, context_terms: Vec<f64>) -> Result<Self> {
        let tokens: Vec<f64> = param_terms
            .iter()
            .zip(&context_terms)
            .map(|(p, c)| p - c)
            .collect();
        let score = mean(&tokens)?;
        Ok(Self {
            param_terms,
            context_terms,
            tokens,
            score,
        })
    }
}

/// Token-averaged `alpha * sum_F PKS - beta * sum_A ECS`.
pub fn redeep_score(trace: &ResidualTrace, weights: &DecoderWeights, cfg: &RegressionConfig) -> Result<ScoreBreakdown> {
    cfg.validate_for(trace)?;
    if trace.response_len() == 0 {
        return Err(Error::invalid("empty response"));
    }
    let mut param = Vec::with_capacity(trace.response_len());
    let mut context = Vec::with_capacity(trace.response_len());
    for n in 0..trace.response_len() {
        let mut p = 0.0;
        for &l in &cfg.ffn_layers {
            p += pks(trace, weights, n, l)?;
        }
        let mut c = 0.0;
        for &(l, h) in &cfg.copy_heads {
            c += ecs(trace, n, l, h, cfg.k_percent)?;
        }
        param.push(cfg.alpha * p);
        context.push(cfg.beta * c);
    }
    ScoreBreakdown::from_terms(param, context)
}

/// Consecutive `[start, end)` ranges of at most `size` tokens; the last may
/// be shorter.
pub fn fixed_chunks(len: usize, size: usize) -> Vec<(usize, usize)> {
    if size == 0 {
        return Vec::new();
    }
    (0..len).step_by(size).map(|s| (s, (s + size).min(len))).collect()
}

/// Mean cosine over `(response_chunk_embedding, context_block_embedding)`
/// pairs.
pub fn chunk_ecs_from_embeddings(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no chunks"));
    }
    let cos = pairs
        .iter()
        .map(|(r, c)| cosine(r, c))
        .collect::<Result<Vec<_>>>()?;
    mean(&cos)
}

fn pooled(trace: &ResidualTrace, positions: std::ops::Range<usize>, layer: usize) -> Vec<f64> {
    let d = trace.meta.d_model;
    let count = positions.len() as f64;
    let mut e = vec![0.0; d];
    for p in positions {
        for (a, v) in e.iter_mut().zip(trace.hidden(Tap::Post, p, layer)) {
            *a += v;
        }
    }
    e.iter_mut().for_each(|a| *a /= count);
    e
}

/// Chunk-level ECS: each response chunk is paired with the context block
/// receiving the most attention (summed over the chunk's tokens and all
/// heads of `layer`), and both are embedded by mean-pooling layer
/// `emb_layer` states.
pub fn chunk_ecs(trace: &ResidualTrace, chunk_size: usize, layer: usize, emb_layer: usize) -> Result<f64> {
    if layer >= trace.n_layers() || emb_layer >= trace.n_layers() {
        return Err(Error::invalid("layer out of range"));
    }
    let resp_chunks = fixed_chunks(trace.response_len(), chunk_size);
    let ctx_blocks = fixed_chunks(trace.context_len(), chunk_size);
    if resp_chunks.is_empty() {
        return Err(Error::invalid("no response chunks"));
    }
    let mut pairs = Vec::with_capacity(resp_chunks.len());
    for &(rs, re) in &resp_chunks {
        let mut block_mass = vec![0.0; ctx_blocks.len()];
        for n in rs..re {
            for h in 0..trace.n_heads() {
                let row = trace.attn_row(n, layer, h);
                for (b, &(cs, ce)) in ctx_blocks.iter().enumerate() {
                    block_mass[b] += row[cs..ce].iter().sum::<f64>();
                }
            }
        }
        let mut best = 0;
        for (b, m) in block_mass.iter().enumerate() {
            if *m > block_mass[best] {
                best = b;
            }
        }
        let (cs, ce) = ctx_blocks[best];
        let base = trace.context_len();
        pairs.push((
            pooled(trace, base + rs..base + re, emb_layer),
            pooled(trace, cs..ce, emb_layer),
        ));
    }
    chunk_ecs_from_embeddings(&pairs)
}

/// Mean over chunks of the mean token score within each chunk.
pub fn chunk_mean(token_scores: &[f64], chunks: &[(usize, usize)]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::invalid("no chunks"));
    }
    let per_chunk = chunks
        .iter()
        .map(|&(s, e)| {
            if s >= e || e > token_scores.len() {
                Err(Error::invalid(format!("empty or out-of-range chunk {s}..{e}")))
            } else {
                mean(&token_scores[s..e])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    mean(&per_chunk)
}

/// Chunk-level PKS at `layer` with fixed-size chunks.
pub fn chunk_pks(trace: &ResidualTrace, weights: &DecoderWeights, chunk_size: usize, layer: usize) -> Result<f64> {
    let tokens = (0..trace.response_len())
        .map(|n| pks(trace, weights, n, layer))
        .collect::<Result<Vec<_>>>()?;
    chunk_mean(&tokens, &fixed_chunks(tokens.len(), chunk_size))
}

/// A candidate's correlation with the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked<K> {
    pub key: K,
    pub corr: f64,
}

/// Ranks candidates by `|pearson(scores, labels)|`, descending; ties go to
/// the smaller key. Constant-score candidates are skipped. Returns at most
/// `n`, warning when fewer are available.
pub fn rank_by_correlation<K: Ord + Copy + std::fmt::Debug>(
    candidates: &[(K, Vec<f64>)],
    labels: &[f64],
    n: usize,
) -> Result<Vec<Ranked<K>>> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for (key, scores) in candidates {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "candidate {key:?} has {} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        match pearson(scores, labels) {
            Ok(corr) => ranked.push(Ranked { key: *key, corr }),
            Err(Error::DegenerateSample(_)) => {
                log::debug!("skipping constant candidate {key:?}");
            }
            Err(e) => return Err(e),
        }
    }
    ranked.sort_by(|a, b| b.corr.abs().total_cmp(&a.corr.abs()).then(a.key.cmp(&b.key)));
    if n > ranked.len() {
        log::warn!(
            "requested {n} candidates but only {} are usable; returning all",
            ranked.len()
        );
    }
    ranked.truncate(n);
    Ok(ranked)
}

/// Selected copy heads and FFN layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub copy_heads: Vec<Ranked<(usize, usize)>>,
    pub ffn_layers: Vec<Ranked<usize>>,
}

/// Picks the `n_heads` heads and `n_ffn` layers whose training-split scores
/// correlate most strongly (in absolute value) with the labels.
pub fn select_heads_layers(
    head_scores: &[((usize, usize), Vec<f64>)],
    layer_scores: &[(usize, Vec<f64>)],
    labels: &[f64],
    n_heads: usize,
    n_ffn: usize,
) -> Result<Selection> {
    let copy_heads = rank_by_correlation(head_scores, labels, n_heads)?;
    let ffn_layers = rank_by_correlation(layer_scores, labels, n_ffn)?;
    if copy_heads.is_empty() || ffn_layers.is_empty() {
        return Err(Error::DegenerateSample(
            "no candidate varies across the training split".into(),
        ));
    }
    Ok(Selection {
        copy_heads,
        ffn_layers,
    })
}

/// Scales head contributions by `mu` and FFN contributions by `nu` when
/// `token_score > tau`; otherwise leaves them untouched. Returns whether
/// scaling was applied.
pub fn mitigate_step(
    head_contribs: &mut [Vec<f64>],
    ffn_contrib: Option<&mut [f64]>,
    token_score: f64,
    m: &Mitigation,
) -> Result<bool> {
    m.validate()?;
    if token_score <= m.tau {
        return Ok(false);
    }
    for c in head_contribs.iter_mut() {
        c.iter_mut().for_each(|v| *v *= m.mu);
    }
    if let Some(f) = ffn_contrib {
        f.iter_mut().for_each(|v| *v *= m.nu);
    }
    Ok(true)
}

/// Outcome of mitigated greedy decoding.
#[derive(Debug, Clone)]
pub struct MitigatedGeneration {
    pub tokens: Vec<u32>,
    /// Unmitigated token score that decided each step.
    pub token_scores: Vec<f64>,
    /// Whether each token was produced with scaling active.
    pub mitigated: Vec<bool>,
}

/// Greedy decoding that recomputes a step with the mitigation hooks
/// whenever the unmitigated token score exceeds `tau`. `score_fn` maps the
/// trace so far (whose last response token is the candidate step) to the
/// token score.
pub fn generate_mitigated<F>(
    weights: &DecoderWeights,
    prompt: &[u32],
    max_new_tokens: usize,
    cfg: &RegressionConfig,
    mut score_fn: F,
) -> Result<MitigatedGeneration>
where
    F: FnMut(&ResidualTrace) -> Result<f64>,
{
    let m = cfg
        .mitigation
        .ok_or_else(|| Error::Config("no mitigation configured".into()))?;
    let hooks = cfg.mitigation_hooks()?;
    if prompt.is_empty() || max_new_tokens == 0 {
        return Err(Error::invalid("empty prompt or zero tokens requested"));
    }
    let plain = Hooks::none();
    let mut state = DecoderState::new(weights);
    let mut records: Vec<TokenRecord> = Vec::new();
    for &t in prompt {
        records.push(state.push(t, &plain)?);
    }
    let mut out = MitigatedGeneration {
        tokens: Vec::new(),
        token_scores: Vec::new(),
        mitigated: Vec::new(),
    };
    let argmax = |r: &TokenRecord| r.next.argmax() as u32;
    let mut next = argmax(records.last().expect("prompt is non-empty"));
    for _ in 0..max_new_tokens {
        let candidate = state.peek(next, &plain)?;
        let mut trial = records.clone();
        trial.push(candidate);
        let mut resp = out.tokens.clone();
        resp.push(next);
        let trace = ResidualTrace::from_records(&weights.config, prompt, &resp, &trial)?;
        let score = score_fn(&trace)?;
        let active = score > m.tau;
        let rec = state.push(next, if active { &hooks } else { &plain })?;
        out.tokens.push(next);
        out.token_scores.push(score);
        out.mitigated.push(active);
        next = argmax(&rec);
        records.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attended_examples() {
        assert_eq!(attended_tokens(&[0.4, 0.3, 0.2, 0.1], 25.0).unwrap(), vec![0]);
        assert_eq!(attended_tokens(&[0.1, 0.2, 0.3, 0.4], 100.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(attended_tokens(&[0.25; 4], 50.0).unwrap(), vec![0, 1]);
        assert!(attended_tokens(&[], 10.0).is_err());
        assert_eq!(attended_count(30, 10.0), 3);
        assert_eq!(attended_count(5, 10.0), 1);
        assert_eq!(attended_count(11, 10.0), 2);
    }

    #[test]
    fn chunk_arithmetic() {
        assert_eq!(fixed_chunks(35, 16), vec![(0, 16), (16, 32), (32, 35)]);
        let pairs = vec![
            (vec![1.0, 0.0], vec![2.0, 0.0]),
            (vec![1.0, 0.0], vec![0.0, 3.0]),
        ];
        assert!((chunk_ecs_from_embeddings(&pairs).unwrap() - 0.5).abs() < 1e-15);
        let toks = [0.2, 0.2, 0.4, 0.4, 0.4];
        assert!((chunk_mean(&toks, &[(0, 2), (2, 5)]).unwrap() - 0.3).abs() < 1e-15);
        assert!(chunk_mean(&toks, &[(2, 2)]).is_err());
        assert!(chunk_mean(&toks, &[]).is_err());
    }

    #[test]
    fn mitigation_validation_and_threshold() {
        let m = Mitigation { mu: 2.0, nu: 0.5, tau: 0.1 };
        let mut heads = vec![vec![1.0, -2.0], vec![0.5, 0.25]];
        let mut ffn = vec![4.0, -8.0];
        assert!(!mitigate_step(&mut heads, Some(&mut ffn), 0.1, &m).unwrap());
        assert_eq!(heads, vec![vec![1.0, -2.0], vec![0.5, 0.25]]);
        assert!(mitigate_step(&mut heads, Some(&mut ffn), 0.2, &m).unwrap());
        assert_eq!(heads, vec![vec![2.0, -4.0], vec![1.0, 0.5]]);
        assert_eq!(ffn, vec![2.0, -4.0]);
        for bad in [
            Mitigation { mu: 1.0, ..m },
            Mitigation { nu: 1.0, ..m },
            Mitigation { nu: 0.0, ..m },
        ] {
            assert!(matches!(mitigate_step(&mut heads, None, 1.0, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn ranking_ties_and_clamp() {
        let labels = [0.0, 1.0, 0.0, 1.0];
        let cands = vec![
            ((5, 1), vec![1.0, 2.0, 1.0, 2.0]),
            ((4, 3), vec![2.0, 1.0, 2.0, 1.0]),
            ((4, 0), vec![3.0, 3.0, 3.0, 3.0]),
        ];
        let r = rank_by_correlation(&cands, &labels, 5).unwrap();
        let keys: Vec<_> = r.iter().map(|x| x.key).collect();
        assert_eq!(keys, vec![(4, 3), (5, 1)]);
        assert!(r[0].corr < 0.0);
    }
}
