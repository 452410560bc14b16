//! Probe-based external context (ECE) and parametric knowledge (PKE)
//! entropies, their regression combination, and per-layer correlation.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::probe::ProbeSet;
use crate::redeep::{attended_tokens, ecs, pks, RegressionConfig, ScoreBreakdown};
use crate::tensor::{mean, pearson, popstd, zscore};
use crate::trace::{ResidualTrace, Tap};

/// Probe output on the post-layer state of response token `n`.
pub fn token_entropy(trace: &ResidualTrace, probes: &ProbeSet, n: usize, layer: usize) -> Result<f64> {
    check(trace, n, layer)?;
    probes
        .get(layer)?
        .predict(trace.hidden(Tap::Post, trace.response_position(n), layer))
}

/// Probe outputs on the attended context states, in context order.
pub fn attended_entropies(
    trace: &ResidualTrace,
    probes: &ProbeSet,
    n: usize,
    layer: usize,
    head: usize,
    k_percent: f64,
) -> Result<Vec<f64>> {
    check(trace, n, layer)?;
    if head >= trace.n_heads() {
        return Err(Error::invalid(format!("head {head} out of range")));
    }
    let probe = probes.get(layer)?;
    attended_tokens(trace.attn_row(n, layer, head), k_percent)?
        .into_iter()
        .map(|j| probe.predict(trace.hidden(Tap::Post, j, layer)))
        .collect()
}

fn check(trace: &ResidualTrace, n: usize, layer: usize) -> Result<()> {
    if n >= trace.response_len() {
        return Err(Error::invalid(format!("response token {n} out of range")));
    }
    if layer >= trace.n_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    Ok(())
}

/// Attended sets whose probe outputs spread less than this are treated as
/// constant.
pub const ECE_SIGMA_FLOOR: f64 = 1e-9;

/// ECE value plus whether it fell back to 0 because the attended set was
/// too small or constant.
fn ece_inner(
    trace: &ResidualTrace,
    probes: &ProbeSet,
    n: usize,
    layer: usize,
    head: usize,
    k_percent: f64,
) -> Result<(f64, bool)> {
    let x = token_entropy(trace, probes, n, layer)?;
    let set = attended_entropies(trace, probes, n, layer, head, k_percent)?;
    // probe outputs of f32 traces carry no information below this spread
    if set.len() >= 2 && popstd(&set)? < ECE_SIGMA_FLOOR {
        return Ok((0.0, true));
    }
    match zscore(x, &set) {
        Ok(z) => Ok((z, false)),
        Err(Error::InvalidInput(_) | Error::DegenerateSample(_)) => Ok((0.0, true)),
        Err(e) => Err(e),
    }
}

/// Z-score of the token's probe output against the probe outputs of its
/// attended context tokens. Falls back to 0 (with a warning) when fewer
/// than two tokens are attended or their outputs are all equal.
pub fn ece(
    trace: &ResidualTrace,
    probes: &ProbeSet,
    n: usize,
    layer: usize,
    head: usize,
    k_percent: f64,
) -> Result<f64> {
    let (z, degenerate) = ece_inner(trace, probes, n, layer, head, k_percent)?;
    if degenerate {
        log::warn!("ECE at token {n}, head ({layer}, {head}): degenerate attended set, using 0");
    }
    Ok(z)
}

/// Absolute change of the probe output across layer `layer`'s FFN.
pub fn pke(trace: &ResidualTrace, probes: &ProbeSet, n: usize, layer: usize) -> Result<f64> {
    check(trace, n, layer)?;
    let probe = probes.get(layer)?;
    let pos = trace.response_position(n);
    let before = probe.predict(trace.hidden(Tap::Attn, pos, layer))?;
    let after = probe.predict(trace.hidden(Tap::Post, pos, layer))?;
    Ok((before - after).abs())
}

/// Token-level terms plus per-component token means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeredeepBreakdown {
    /// Token-mean ECE per selected head.
    pub ece: Vec<((usize, usize), f64)>,
    /// Token-mean PKE per selected layer.
    pub pke: Vec<(usize, f64)>,
    pub terms: ScoreBreakdown,
    /// Token/head pairs whose ECE fell back to 0.
    pub degenerate_ece: usize,
}

impl SeredeepBreakdown {
    pub fn score(&self) -> f64 {
        self.terms.score
    }
}

/// Token-averaged `alpha * sum_F PKE - beta * sum_A ECE`.
pub fn seredeep_score(
    trace: &ResidualTrace,
    probes: &ProbeSet,
    cfg: &RegressionConfig,
) -> Result<SeredeepBreakdown> {
    cfg.validate_for(trace)?;
    for &l in cfg.ffn_layers.iter().chain(cfg.copy_heads.iter().map(|(l, _)| l)) {
        probes.get(l)?;
    }
    let n_tok = trace.response_len();
    let mut ece_sum = vec![0.0; cfg.copy_heads.len()];
    let mut pke_sum = vec![0.0; cfg.ffn_layers.len()];
    let mut param = Vec::with_capacity(n_tok);
    let mut context = Vec::with_capacity(n_tok);
    let mut degenerate = 0;
    for n in 0..n_tok {
        let mut p = 0.0;
        for (i, &l) in cfg.ffn_layers.iter().enumerate() {
            let v = pke(trace, probes, n, l)?;
            pke_sum[i] += v;
            p += v;
        }
        let mut c = 0.0;
        for (i, &(l, h)) in cfg.copy_heads.iter().enumerate() {
            let (v, deg) = ece_inner(trace, probes, n, l, h, cfg.k_percent)?;
            degenerate += deg as usize;
            ece_sum[i] += v;
            c += v;
        }
        param.push(cfg.alpha * p);
        context.push(cfg.beta * c);
    }
    if degenerate > 0 {
        log::warn!("{degenerate} token/head ECE values used the degenerate fallback of 0");
    }
    let nf = n_tok as f64;
    Ok(SeredeepBreakdown {
        ece: cfg.copy_heads.iter().copied().zip(ece_sum.iter().map(|s| s / nf)).collect(),
        pke: cfg.ffn_layers.iter().copied().zip(pke_sum.iter().map(|s| s / nf)).collect(),
        terms: ScoreBreakdown::from_terms(param, context)?,
        degenerate_ece: degenerate,
    })
}

/// Token-mean component scores of one record for every head of every
/// profiled layer. Because the regression score is linear, any choice of
/// `F`, `A`, `alpha`, `beta` can be scored from a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordProfile {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    /// `[layer index]`
    pub pke: Vec<f64>,
    /// `[layer index]`; absent when no unembedding was available.
    pub pks: Option<Vec<f64>>,
    /// `[layer index][head]`
    pub ece: Vec<Vec<f64>>,
    pub ecs: Vec<Vec<f64>>,
    pub degenerate_ece: usize,
}

/// Profiles `trace` over `layers`. PKS needs `weights`; ECS and ECE don't.
pub fn record_profile(
    trace: &ResidualTrace,
    probes: &ProbeSet,
    weights: Option<&DecoderWeights>,
    layers: &[usize],
    k_percent: f64,
) -> Result<RecordProfile> {
    let n_tok = trace.response_len();
    let h_count = trace.n_heads();
    let mut out = RecordProfile {
        layers: layers.to_vec(),
        n_heads: h_count,
        pke: Vec::with_capacity(layers.len()),
        pks: weights.map(|_| Vec::with_capacity(layers.len())),
        ece: Vec::with_capacity(layers.len()),
        ecs: Vec::with_capacity(layers.len()),
        degenerate_ece: 0,
    };
    for &l in layers {
        let mut pke_t = Vec::with_capacity(n_tok);
        let mut pks_t = Vec::with_capacity(n_tok);
        let mut ece_h = vec![0.0; h_count];
        let mut ecs_h = vec![0.0; h_count];
        for n in 0..n_tok {
            pke_t.push(pke(trace, probes, n, l)?);
            if let Some(w) = weights {
                pks_t.push(pks(trace, w, n, l)?);
            }
            for h in 0..h_count {
                let (v, deg) = ece_inner(trace, probes, n, l, h, k_percent)?;
                out.degenerate_ece += deg as usize;
                ece_h[h] += v / n_tok as f64;
                ecs_h[h] += ecs(trace, n, l, h, k_percent)? / n_tok as f64;
            }
        }
        out.pke.push(mean(&pke_t)?);
        if let Some(p) = out.pks.as_mut() {
            p.push(mean(&pks_t)?);
        }
        out.ece.push(ece_h);
        out.ecs.push(ecs_h);
    }
    Ok(out)
}

/// Which parametric and context components a score combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamComponent {
    Pke,
    Pks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextComponent {
    Ece,
    Ecs,
}

impl RecordProfile {
    fn layer_index(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} was not profiled")))
    }

    pub fn param(&self, which: ParamComponent, layer: usize) -> Result<f64> {
        let i = self.layer_index(layer)?;
        match which {
            ParamComponent::Pke => Ok(self.pke[i]),
            ParamComponent::Pks => self
                .pks
                .as_ref()
                .map(|p| p[i])
                .ok_or_else(|| Error::Config("PKS requires model weights".into())),
        }
    }

    pub fn context(&self, which: ContextComponent, layer: usize, head: usize) -> Result<f64> {
        let i = self.layer_index(layer)?;
        if head >= self.n_heads {
            return Err(Error::invalid(format!("head {head} out of range")));
        }
        Ok(match which {
            ContextComponent::Ece => self.ece[i][head],
            ContextComponent::Ecs => self.ecs[i][head],
        })
    }

    /// `alpha * sum_F param - beta * sum_A context`, with either term
    /// omitted when its component is `None`.
    pub fn score(
        &self,
        cfg: &RegressionConfig,
        param: Option<ParamComponent>,
        context: Option<ContextComponent>,
    ) -> Result<f64> {
        let mut s = 0.0;
        if let Some(p) = param {
            for &l in &cfg.ffn_layers {
                s += cfg.alpha * self.param(p, l)?;
            }
        }
        if let Some(c) = context {
            for &(l, h) in &cfg.copy_heads {
                s -= cfg.beta * self.context(c, l, h)?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    Ece,
    Pke,
}

/// One row of a per-layer (or per-head) correlation table. `corr` is
/// `None` when the series is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub layer: usize,
    pub head: Option<usize>,
    pub corr: Option<f64>,
}

/// Pearson correlation of per-record component means with the labels.
/// ECE is negated first, so an expected negative relation reads positive.
/// ECE rows are per head followed by a head-mean row (`head: None`).
pub fn layer_correlation(
    profiles: &[RecordProfile],
    labels: &[f64],
    mode: CorrelationMode,
) -> Result<Vec<CorrelationEntry>> {
    if profiles.len() < 2 || profiles.len() != labels.len() {
        return Err(Error::invalid("need at least two profiles, one label each"));
    }
    if !(labels.contains(&0.0) && labels.contains(&1.0)) {
        return Err(Error::invalid("both classes must be present"));
    }
    let first = &profiles[0];
    if profiles.iter().any(|p| p.layers != first.layers || p.n_heads != first.n_heads) {
        return Err(Error::invalid("profiles cover different layers"));
    }
    let corr = |series: Vec<f64>| match pearson(&series, labels) {
        Ok(c) => Ok(Some(c)),
        Err(Error::DegenerateSample(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let mut out = Vec::new();
    for (i, &layer) in first.layers.iter().enumerate() {
        match mode {
            CorrelationMode::Pke => out.push(CorrelationEntry {
                layer,
                head: None,
                corr: corr(profiles.iter().map(|p| p.pke[i]).collect())?,
            }),
            CorrelationMode::Ece => {
                for h in 0..first.n_heads {
                    out.push(CorrelationEntry {
                        layer,
                        head: Some(h),
                        corr: corr(profiles.iter().map(|p| -p.ece[i][h]).collect())?,
                    });
                }
                out.push(CorrelationEntry {
                    layer,
                    head: None,
                    corr: corr(
                        profiles
                            .iter()
                            .map(|p| -p.ece[i].iter().sum::<f64>() / first.n_heads as f64)
                            .collect(),
                    )?,
                });
            }
        }
    }
    Ok(out)
}
