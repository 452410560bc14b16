//! Synthetic corpora with a planted hallucination mechanism, the end-to-end
//! scoring pipeline, ablations, interventions and reports.
//!
//! The planted decoder makes the detector's causal story literally true:
//! faithful response tokens copy context tokens through a copy head, while
//! hallucinated ("trigger") tokens route their copy-head attention to
//! distractor context tokens and have their FFNs write a large drift into
//! the residual stream. Sampled answers for hallucinated records are more
//! diverse, so their semantic entropy is higher.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    mix_seed, random_model, trace_sequence, AttentionNoise, DecoderWeights, Hooks, LayerWeights,
    ModelConfig,
};
use crate::entropy::{cluster_responses, discrete_se, EntailmentOracle, ExactMatchOracle, SeMode};
use crate::error::{Error, Result};
use crate::probe::{train_probe, ProbeExample, ProbeSet, ProbeTrainSet, TrainOptions};
use crate::redeep::{select_heads_layers, RegressionConfig, Selection};
use crate::seredeep::{
    layer_correlation, record_profile, seredeep_score, ContextComponent, CorrelationEntry,
    CorrelationMode, ParamComponent, RecordProfile,
};
use crate::store::{DatasetRecord, SampledResponse, Split};
use crate::tensor::{auc, binary_metrics, mean, MetricsReport};
use crate::trace::{ResidualTrace, Tap};

/// Coefficients used for the main score.
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.2;

/// How one class of responses is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantStyle {
    /// Probability that a response token copies a context token.
    pub copy_strength: f64,
    /// Probability that a non-copied token is a drift-inducing trigger
    /// token (otherwise it is a content token absent from the context).
    pub ffn_drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub faithful: PlantStyle,
    pub hallucinated: PlantStyle,
}

impl Plant {
    pub fn planted() -> Self {
        Self {
            faithful: PlantStyle {
                copy_strength: 0.85,
                ffn_drift: 0.15,
            },
            hallucinated: PlantStyle {
                copy_strength: 0.25,
                ffn_drift: 0.8,
            },
        }
    }

    /// Both labels drawn from the same style: labels carry no signal.
    pub fn null() -> Self {
        let s = PlantStyle {
            copy_strength: 0.55,
            ffn_drift: 0.5,
        };
        Self {
            faithful: s,
            hallucinated: s,
        }
    }

    pub fn style(&self, label: u8) -> PlantStyle {
        if label == 1 {
            self.hallucinated
        } else {
            self.faithful
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_records: usize,
    /// Inclusive context length range; lengths vary so that the probed
    /// last-token position varies across records.
    pub context_len: (usize, usize),
    /// Inclusive response length range.
    pub response_len: (usize, usize),
    /// Sampled answers per record for semantic entropy.
    pub n_samples: usize,
    /// Fraction of records in the training split.
    pub train_fraction: f64,
    pub plant: Plant,
    #[serde(default)]
    pub gains: PlantGains,
    pub model: ModelConfig,
}

impl SynthSpec {
    /// 12-layer, 4-head, 64-wide decoder; 200 records.
    pub fn default_planted(seed: u64) -> Self {
        let mut model = ModelConfig::toy(12, 4, 64, 48);
        model.max_positions = 96;
        Self {
            seed,
            n_records: 200,
            context_len: (50, 80),
            response_len: (6, 10),
            n_samples: 10,
            train_fraction: 0.5,
            plant: Plant::planted(),
            gains: PlantGains::default(),
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        PlantLayout::new(&self.model)?;
        if self.n_records < 20 {
            return Err(Error::Config("n_records must be at least 20".into()));
        }
        let (c, r) = (self.context_len, self.response_len);
        if c.0 > c.1 || r.0 > r.1 {
            return Err(Error::Config("length ranges must be (min, max)".into()));
        }
        if c.0 < 5 || r.0 == 0 {
            return Err(Error::Config("context needs >= 5 tokens and response >= 1".into()));
        }
        if c.1 + r.1 > self.model.max_positions {
            return Err(Error::Config("context + response exceed max_positions".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        for s in [self.plant.faithful, self.plant.hallucinated] {
            if !(0.0..=1.0).contains(&s.copy_strength) || !(0.0..=1.0).contains(&s.ffn_drift) {
                return Err(Error::Config("plant probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Residual-stream layout of the planted decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantLayout {
    /// Identity code dimensions.
    pub id: std::ops::Range<usize>,
    /// Drift-strength carrier read by every FFN.
    pub strength: usize,
    /// Mirror of `strength` keeping every embedding mean-zero.
    pub strength_mirror: usize,
    /// `drift[l] = (plus, minus)` dimensions of layer `l`'s drift direction.
    pub drift: Vec<(usize, usize)>,
    /// Dimensions the copy head writes copied identities into.
    pub slot: std::ops::Range<usize>,
    pub n_content: usize,
    pub n_distractor: usize,
    pub n_trigger: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Content,
    Distractor,
    Trigger,
}

impl PlantLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let id_dims = cfg.d_head.saturating_sub(1).min(15);
        let drift_start = id_dims + 2;
        let slot_start = drift_start + 2 * cfg.n_layers;
        if id_dims < 4 || slot_start + 4 > cfg.d_model {
            return Err(Error::Config(format!(
                "planted layout needs d_head >= 5 and d_model >= {}",
                slot_start + 4
            )));
        }
        if cfg.vocab_size < 12 {
            return Err(Error::Config("planted layout needs vocab_size >= 12".into()));
        }
        let n_distractor = cfg.vocab_size / 6;
        let n_trigger = cfg.vocab_size / 6;
        let slot_len = id_dims.min(cfg.d_model - slot_start - 2);
        Ok(Self {
            id: 0..id_dims,
            strength: id_dims,
            strength_mirror: id_dims + 1,
            drift: (0..cfg.n_layers)
                .map(|l| (drift_start + 2 * l, drift_start + 2 * l + 1))
                .collect(),
            slot: slot_start..slot_start + slot_len,
            n_content: cfg.vocab_size - n_distractor - n_trigger,
            n_distractor,
            n_trigger,
        })
    }

    pub fn class(&self, token: u32) -> TokenClass {
        let t = token as usize;
        if t < self.n_content {
            TokenClass::Content
        } else if t < self.n_content + self.n_distractor {
            TokenClass::Distractor
        } else {
            TokenClass::Trigger
        }
    }

    pub fn content_tokens(&self) -> std::ops::Range<u32> {
        0..self.n_content as u32
    }

    pub fn distractor_tokens(&self) -> std::ops::Range<u32> {
        self.n_content as u32..(self.n_content + self.n_distractor) as u32
    }

    pub fn trigger_tokens(&self) -> std::ops::Range<u32> {
        (self.n_content + self.n_distractor) as u32
            ..(self.n_content + self.n_distractor + self.n_trigger) as u32
    }

    /// Surface form of a token in response texts.
    pub fn word(&self, token: u32) -> String {
        match self.class(token) {
            TokenClass::Content => format!("w{token}"),
            TokenClass::Distractor => format!("d{}", token as usize - self.n_content),
            TokenClass::Trigger => format!("t{}", token as usize - self.n_content - self.n_distractor),
        }
    }
}

/// Gains of the planted circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantGains {
    /// Scale of the background random weights.
    pub background: f64,
    pub id_scale: f64,
    /// Embedded drift strength of trigger tokens; distractors draw theirs
    /// from `distractor_strength`.
    pub trigger_strength: f64,
    pub distractor_strength: (f64, f64),
    /// Query/key gain of the copy head.
    pub qk: f64,
    /// Query/key gain of the drift channel of the copy head.
    pub drift_qk: f64,
    pub ov: f64,
    /// FFN drift gain at the first and last layer (linear in between).
    pub drift: (f64, f64),
    /// Activation threshold of the drift unit.
    pub drift_bias: f64,
    pub pos_scale: f64,
}

impl Default for PlantGains {
    fn default() -> Self {
        Self {
            background: 0.0,
            id_scale: 3.0,
            trigger_strength: 3.0,
            distractor_strength: (4.0, 7.0),
            qk: 4.0,
            drift_qk: 2.0,
            ov: 0.6,
            drift: (1.2, 1.6),
            drift_bias: 0.3,
            pos_scale: 0.5,
        }
    }
}

/// Decoder weights realizing the planted mechanism over a small random
/// background.
///
/// Token class is carried by the magnitude of one embedded "strength"
/// coordinate whose sign alternates across the vocabulary, so no linear
/// readout recovers it. Every FFN rectifies it into a drift along its own
/// layer's direction and erases the previous layer's drift, so class
/// information sits in a different direction before and after each FFN.
/// Head 0 matches identities (copying); one extra query/key channel in
/// every head sends drifted tokens to drifted tokens, so triggers attend to
/// distractors.
pub fn planted_model(cfg: &ModelConfig, gains: &PlantGains, seed: u64) -> Result<DecoderWeights> {
    let lay = PlantLayout::new(cfg)?;
    let mut w = random_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    let shrink = gains.background / crate::decoder::RANDOM_WEIGHT_BOUND;
    for l in &mut w.layers {
        for m in l.wq.iter_mut().chain(&mut l.wk).chain(&mut l.wv).chain(&mut l.wo) {
            m.scale(shrink);
        }
        l.ffn1.scale(shrink);
        l.ffn2.scale(shrink);
        l.b1.iter_mut().for_each(|b| *b *= shrink);
        l.b2.iter_mut().for_each(|b| *b *= shrink);
    }

    // distractors and triggers reuse content codes: they are variants of
    // ordinary words, so identity features do not reveal the class
    let n_id = lay.id.len();
    let codes: Vec<Vec<f64>> = (0..lay.n_content)
        .map(|_| {
            let c: Vec<f64> = (0..n_id).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit_mean_zero(c)
        })
        .collect();
    for t in 0..cfg.vocab_size {
        let code = &codes[t % lay.n_content];
        for v in 0..cfg.d_model {
            w.emb.set(t, v, 0.0);
        }
        for (i, c) in code.iter().enumerate() {
            w.emb.set(t, lay.id.start + i, gains.id_scale * c);
        }
        let strength = match lay.class(t as u32) {
            TokenClass::Content => 0.0,
            TokenClass::Distractor => {
                let (lo, hi) = gains.distractor_strength;
                rng.random_range(lo..=hi)
            }
            TokenClass::Trigger => gains.trigger_strength,
        };
        // alternating signs keep the class out of reach of linear readouts
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        w.emb.set(t, lay.strength, sign * strength);
        w.emb.set(t, lay.strength_mirror, -sign * strength);
    }
    // positions live outside the planted dimensions
    let pos_start = lay.slot.end;
    for p in 0..cfg.max_positions {
        let code: Vec<f64> = (pos_start..cfg.d_model)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for v in 0..cfg.d_model {
            w.pos.set(p, v, 0.0);
        }
        for (i, c) in unit_mean_zero(code).into_iter().enumerate() {
            w.pos.set(p, pos_start + i, gains.pos_scale * c);
        }
    }

    let hd = cfg.d_head - 1;
    let span = (cfg.n_layers.max(2) - 1) as f64;
    for (l, lw) in w.layers.iter_mut().enumerate() {
        let g = cfg.kv_head_of(0);
        for (i, d) in lay.id.clone().enumerate() {
            lw.wq[0].set(d, i, gains.qk);
            lw.wk[g].set(d, i, gains.qk);
            lw.wv[g].set(d, i, 1.0);
        }
        for (i, d) in lay.slot.clone().enumerate() {
            lw.wo[0].set(i, d, gains.ov);
        }

        // drift channel: drifted queries seek drifted keys, in every head
        if l > 0 {
            let (p, m) = lay.drift[l - 1];
            for h in 0..cfg.n_heads {
                for (d, sign) in [(p, 1.0), (m, -1.0)] {
                    lw.wq[h].set(d, hd, sign * gains.drift_qk);
                    lw.wk[cfg.kv_head_of(h)].set(d, hd, sign * gains.drift_qk);
                }
            }
        }

        let clear_unit = |lw: &mut LayerWeights, unit: usize| {
            for v in 0..cfg.d_model {
                lw.ffn1.set(unit, v, 0.0);
                lw.ffn2.set(v, unit, 0.0);
            }
            lw.b1[unit] = 0.0;
        };
        // units 0 and 1 rectify |strength| into this layer's drift
        let (p, m) = lay.drift[l];
        let amp = gains.drift.0 + (gains.drift.1 - gains.drift.0) * l as f64 / span;
        for (unit, sign) in [(0, 1.0), (1, -1.0)] {
            clear_unit(lw, unit);
            lw.ffn1.set(unit, lay.strength, sign);
            lw.b1[unit] = -gains.drift_bias;
            lw.ffn2.set(p, unit, amp);
            lw.ffn2.set(m, unit, -amp);
        }
        // units 2..=5 erase the previous layer's drift
        if l > 0 {
            let (pp, pm) = lay.drift[l - 1];
            let mut unit = 2;
            for d in [pp, pm] {
                for sign in [1.0, -1.0] {
                    clear_unit(lw, unit);
                    lw.ffn1.set(unit, d, sign);
                    lw.ffn2.set(d, unit, -sign);
                    unit += 1;
                }
            }
        }
    }
    w.quantize_f32();
    w.validate()?;
    Ok(w)
}

/// Centers `v` and scales it to unit norm. Every planted write is
/// mean-zero, so LayerNorm never shifts unused coordinates away from 0.
fn unit_mean_zero(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Records, their traces, and the model that produced them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub model: DecoderWeights,
    pub records: Vec<DatasetRecord>,
    pub traces: Vec<ResidualTrace>,
}

impl Corpus {
    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.hallucination_label).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Builds the planted model and `n_records` labeled records, with balanced
/// labels and a stratified train/test split. Deterministic per seed.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let model = planted_model(&spec.model, &spec.gains, spec.seed)?;
    generate_corpus_with(spec, model)
}

/// Like [`generate_corpus`], but traces with an existing model, which must
/// share the corpus spec's model configuration.
pub fn generate_corpus_with(spec: &SynthSpec, model: DecoderWeights) -> Result<Corpus> {
    spec.validate()?;
    if model.config != spec.model {
        return Err(Error::Config("model configuration differs from the corpus spec".into()));
    }
    let lay = PlantLayout::new(&spec.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 2]));

    let n1 = spec.n_records / 2;
    let mut labels: Vec<u8> = (0..spec.n_records).map(|i| (i < n1) as u8).collect();
    labels.shuffle(&mut rng);
    let mut splits = vec![Split::Test; spec.n_records];
    for class in [0u8, 1] {
        let idx: Vec<usize> = (0..spec.n_records).filter(|&i| labels[i] == class).collect();
        let n_train = (idx.len() as f64 * spec.train_fraction).round() as usize;
        for &i in &idx[..n_train] {
            splits[i] = Split::Train;
        }
    }

    let mut records = Vec::with_capacity(spec.n_records);
    let mut traces = Vec::with_capacity(spec.n_records);
    for i in 0..spec.n_records {
        let mut rrng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 3, i as u64]));
        let label = labels[i];
        let style = spec.plant.style(label);
        let (context, response, hallucinated_frac) =
            synth_sequence(
                &lay,
                rrng.random_range(spec.context_len.0..=spec.context_len.1),
                rrng.random_range(spec.response_len.0..=spec.response_len.1),
                style,
                &mut rrng,
            );
        let trace = trace_sequence(&model, &context, &response, &Hooks::none())?;
        let text = render(&lay, &response);
        let samples = synth_samples(&lay, &text, &response, hallucinated_frac, spec.n_samples, &mut rrng);
        let id = format!("rec-{i:04}");
        records.push(DatasetRecord {
            trace_path: Some(format!("traces/{id}.srtr")),
            id,
            context_token_ids: context,
            response_token_ids: response,
            response_text: text,
            hallucination_label: label,
            sampled_responses: Some(samples),
            split: splits[i],
            extra: Default::default(),
        });
        traces.push(trace);
    }
    Ok(Corpus {
        spec: spec.clone(),
        model,
        records,
        traces,
    })
}

fn render(lay: &PlantLayout, tokens: &[u32]) -> String {
    tokens.iter().map(|&t| lay.word(t)).collect::<Vec<_>>().join(" ")
}

/// Returns context, response and the fraction of non-copied response tokens.
fn synth_sequence(
    lay: &PlantLayout,
    context_len: usize,
    response_len: usize,
    style: PlantStyle,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>, f64) {
    let n_distract = (context_len / 5).max(1).min(context_len - 1);
    let content: Vec<u32> = lay.content_tokens().collect();
    let distract: Vec<u32> = lay.distractor_tokens().collect();
    let triggers: Vec<u32> = lay.trigger_tokens().collect();

    let mut context: Vec<u32> = (0..context_len - n_distract)
        .map(|_| *content.choose(rng).expect("content vocabulary is non-empty"))
        .collect();
    context.extend((0..n_distract).map(|_| *distract.choose(rng).expect("non-empty")));
    context.shuffle(rng);

    let in_context: Vec<u32> = context.iter().copied().filter(|t| lay.class(*t) == TokenClass::Content).collect();
    let novel: Vec<u32> = content.iter().copied().filter(|t| !in_context.contains(t)).collect();
    let mut response = Vec::with_capacity(response_len);
    let mut off = 0usize;
    for _ in 0..response_len {
        let tok = if rng.random::<f64>() < style.copy_strength {
            *in_context.choose(rng).expect("context has content tokens")
        } else {
            off += 1;
            if rng.random::<f64>() < style.ffn_drift || novel.is_empty() {
                // drifted answers echo a context distractor half the time
                if rng.random::<bool>() {
                    let ds: Vec<u32> =
                        context.iter().copied().filter(|t| lay.class(*t) == TokenClass::Distractor).collect();
                    *ds.choose(rng).expect("context has distractors")
                } else {
                    *triggers.choose(rng).expect("non-empty")
                }
            } else {
                *novel.choose(rng).expect("checked non-empty")
            }
        };
        response.push(tok);
    }
    (context, response, off as f64 / response_len as f64)
}

/// Sampled answers: the main answer (with surface variants) with
/// probability falling in the share of non-copied tokens, otherwise one of a
/// few alternative answers.
fn synth_samples(
    lay: &PlantLayout,
    text: &str,
    response: &[u32],
    off_frac: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SampledResponse> {
    let keep = (0.95 - 0.8 * off_frac).clamp(0.05, 0.95);
    let alternatives: Vec<String> = (0..4)
        .map(|_| {
            let toks: Vec<u32> = response
                .iter()
                .map(|_| rng.random_range(0..lay.n_content as u32))
                .collect();
            render(lay, &toks)
        })
        .collect();
    (0..n)
        .map(|_| {
            let (text, lo) = if rng.random::<f64>() < keep {
                let t = match rng.random_range(0..3) {
                    0 => text.to_string(),
                    1 => format!("{text}."),
                    _ => text.to_uppercase(),
                };
                (t, 0.6)
            } else {
                (alternatives.choose(rng).expect("non-empty").clone(), 0.2)
            };
            let token_probs = response.iter().map(|_| rng.random_range(lo..0.99)).collect();
            SampledResponse { text, token_probs }
        })
        .collect()
}

/// Discrete semantic entropy of one record's sampled answers.
pub fn record_se<O: EntailmentOracle + ?Sized>(
    record: &DatasetRecord,
    oracle: &mut O,
    mode: SeMode,
) -> Result<Option<f64>> {
    let Some(samples) = record.sampled_responses.as_ref().filter(|s| s.len() >= 2) else {
        return Ok(None);
    };
    let question = record
        .extra
        .get("question")
        .and_then(|q| q.as_str())
        .unwrap_or("");
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let clusters = cluster_responses(question, &texts, oracle)?;
    discrete_se(&clusters, samples.len(), mode).map(Some)
}

/// Probe training examples for `layer`: the post-layer state of each
/// record's last response token, paired with its discrete semantic entropy.
/// Records without samples or traces are skipped with a warning.
pub fn build_probe_dataset<O: EntailmentOracle + ?Sized>(
    records: &[&DatasetRecord],
    traces: &[Option<&ResidualTrace>],
    oracle: &mut O,
    layer: usize,
) -> Result<ProbeTrainSet> {
    if records.len() != traces.len() {
        return Err(Error::invalid("one trace slot per record required"));
    }
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (rec, trace) in records.iter().zip(traces) {
        let (Some(trace), Some(se)) = (trace, record_se(rec, oracle, SeMode::Standard)?) else {
            skipped += 1;
            continue;
        };
        if layer >= trace.n_layers() {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        let last = trace.response_position(trace.response_len() - 1);
        examples.push(ProbeExample {
            hidden: trace.hidden(Tap::Post, last, layer).to_vec(),
            se_value: se,
        });
    }
    if skipped > 0 {
        log::warn!("build_probe_dataset: skipped {skipped} records lacking samples or traces");
    }
    Ok(ProbeTrainSet { layer, examples })
}

/// Runs `f` on a pool of `jobs` threads (1 = current thread only).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub alpha: f64,
    pub beta: f64,
    pub k_percent: f64,
    /// Copy heads to select.
    pub n_heads: usize,
    /// FFN layers to select.
    pub n_ffn: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// First layer eligible for probes and selection; the model's floor
    /// when unset.
    pub layer_floor: Option<usize>,
    /// Semantic entropy variant the probes are trained against.
    #[serde(default)]
    pub se_mode: SeMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            k_percent: crate::redeep::DEFAULT_K_PERCENT,
            n_heads: 1,
            n_ffn: 2,
            epochs: crate::probe::DEFAULT_EPOCHS,
            lr: crate::probe::DEFAULT_LR,
            seed: 0,
            layer_floor: None,
            se_mode: SeMode::Standard,
        }
    }
}

/// Trains one probe per eligible layer on the training split.
pub fn train_probes(
    records: &[DatasetRecord],
    traces: &[ResidualTrace],
    layers: &[usize],
    opts: &PipelineOptions,
    oracle: &mut dyn EntailmentOracle,
) -> Result<ProbeSet> {
    let train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    let recs: Vec<&DatasetRecord> = train.iter().map(|&i| &records[i]).collect();
    let trs: Vec<Option<&ResidualTrace>> = train.iter().map(|&i| Some(&traces[i])).collect();
    // SE does not depend on the layer, so cluster once and reuse it
    let mut se = Vec::with_capacity(recs.len());
    for r in &recs {
        se.push(record_se(r, oracle, opts.se_mode)?);
    }
    let mut probes = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut examples = Vec::new();
        for (t, s) in trs.iter().zip(&se) {
            if let (Some(t), Some(s)) = (t, s) {
                let last = t.response_position(t.response_len() - 1);
                examples.push(ProbeExample {
                    hidden: t.hidden(Tap::Post, last, layer).to_vec(),
                    se_value: *s,
                });
            }
        }
        let set = ProbeTrainSet { layer, examples };
        probes.push(train_probe(
            &set,
            TrainOptions {
                epochs: opts.epochs,
                lr: opts.lr,
                seed: opts.seed,
            },
        )?);
    }
    ProbeSet::new(probes)
}

/// Profiles every trace over `layers`, in parallel with ordered results.
pub fn profile_all(
    traces: &[ResidualTrace],
    probes: &ProbeSet,
    weights: Option<&DecoderWeights>,
    layers: &[usize],
    k_percent: f64,
) -> Result<Vec<RecordProfile>> {
    traces
        .par_iter()
        .map(|t| record_profile(t, probes, weights, layers, k_percent))
        .collect()
}

/// Selects heads and layers on the training profiles.
pub fn select_from_profiles(
    profiles: &[&RecordProfile],
    labels: &[f64],
    n_heads: usize,
    n_ffn: usize,
) -> Result<Selection> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::invalid("no training profiles"))?;
    let mut heads = Vec::new();
    let mut layers = Vec::new();
    for (i, &l) in first.layers.iter().enumerate() {
        layers.push((l, profiles.iter().map(|p| p.pke[i]).collect()));
        for h in 0..first.n_heads {
            heads.push(((l, h), profiles.iter().map(|p| p.ece[i][h]).collect()));
        }
    }
    select_heads_layers(&heads, &layers, labels, n_heads, n_ffn)
}

/// Accuracy-maximizing threshold on `scores` (ties to the lowest); used to
/// fix the operating point on the training split.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels must be non-empty and aligned"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cands = vec![sorted[0]];
    cands.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(sorted[sorted.len() - 1] + 1.0);
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for t in cands {
        let acc = binary_metrics(scores, labels, t)?.acc;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best.1)
}

/// Metrics of `scores` at `threshold` (score >= threshold flags a
/// hallucination).
pub fn evaluate(labels: &[u8], scores: &[f64], threshold: f64) -> Result<MetricsReport> {
    binary_metrics(scores, labels, threshold)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub param: Option<ParamComponent>,
    pub context: Option<ContextComponent>,
    pub metrics: MetricsReport,
}

/// Component combinations compared by the ablation, in report order.
pub fn ablation_variants() -> Vec<(&'static str, Option<ParamComponent>, Option<ContextComponent>)> {
    use ContextComponent::*;
    use ParamComponent::*;
    vec![
        ("PKE only", Some(Pke), None),
        ("ECE only", None, Some(Ece)),
        ("PKE + ECE", Some(Pke), Some(Ece)),
        ("ECS", None, Some(Ecs)),
        ("PKS", Some(Pks), None),
        ("ECS + PKS", Some(Pks), Some(Ecs)),
        ("ECS + PKE", Some(Pke), Some(Ecs)),
        ("ECE + PKS", Some(Pks), Some(Ece)),
    ]
}

/// Scores every variant on `eval` profiles, with thresholds fit on `fit`.
pub fn run_ablation(
    fit: (&[&RecordProfile], &[u8]),
    eval: (&[&RecordProfile], &[u8]),
    cfg: &RegressionConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, param, context) in ablation_variants() {
        let score = |ps: &[&RecordProfile]| -> Result<Vec<f64>> {
            ps.iter().map(|p| p.score(cfg, param, context)).collect()
        };
        let threshold = best_threshold(&score(fit.0)?, fit.1)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            param,
            context,
            metrics: evaluate(eval.1, &score(eval.0)?, threshold)?,
        });
    }
    Ok(rows)
}

/// Mean of the defined correlations among `keep`.
fn mean_corr(entries: &[CorrelationEntry], keep: impl Fn(&CorrelationEntry) -> bool) -> Option<f64> {
    let vals: Vec<f64> = entries.iter().filter(|e| keep(e)).filter_map(|e| e.corr).collect();
    mean(&vals).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    /// Per layer and head, Pearson(-ECE, label).
    pub ece: Vec<CorrelationEntry>,
    /// Per layer, Pearson(PKE, label).
    pub pke: Vec<CorrelationEntry>,
    /// Mean Pearson(-ECE, label) over the selected heads.
    pub mean_inverted_ece: Option<f64>,
    /// Mean Pearson(PKE, label) over the selected layers.
    pub mean_pke: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub options: PipelineOptions,
    pub config: RegressionConfig,
    pub selection: Selection,
    pub probe_layers: Vec<usize>,
    pub threshold: f64,
    pub test_metrics: MetricsReport,
    pub ablation: Vec<AblationRow>,
    pub correlation: CorrelationSummary,
    /// Probe AUC on the test split against binarized SE, per layer.
    pub probe_auc: Vec<(usize, Option<f64>)>,
    pub test_ids: Vec<String>,
    pub test_scores: Vec<f64>,
}

/// Everything the pipeline produced, including trained artifacts.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub probes: ProbeSet,
    pub config: RegressionConfig,
}

/// Probe training, selection, scoring, ablation and correlation analysis on
/// a labeled corpus with train/test splits.
pub fn run_pipeline(
    records: &[DatasetRecord],
    traces: &[ResidualTrace],
    weights: Option<&DecoderWeights>,
    opts: &PipelineOptions,
    oracle: &mut dyn EntailmentOracle,
) -> Result<PipelineRun> {
    if records.len() != traces.len() || records.is_empty() {
        return Err(Error::invalid("need one trace per record"));
    }
    let meta = &traces[0].meta;
    let floor = opts.layer_floor.unwrap_or(meta.min_score_layer);
    if floor >= meta.n_layers {
        return Err(Error::Config(format!("layer floor {floor} beyond the model")));
    }
    let layers: Vec<usize> = (floor..meta.n_layers).collect();
    let probes = train_probes(records, traces, &layers, opts, oracle)?;
    let profiles = profile_all(traces, &probes, weights, &layers, opts.k_percent)?;

    let split = |s: Split| -> (Vec<&RecordProfile>, Vec<u8>, Vec<usize>) {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == s).collect();
        (
            idx.iter().map(|&i| &profiles[i]).collect(),
            idx.iter().map(|&i| records[i].hallucination_label).collect(),
            idx,
        )
    };
    let (train_p, train_y, _) = split(Split::Train);
    let (test_p, test_y, test_idx) = split(Split::Test);
    if test_p.is_empty() || train_p.is_empty() {
        return Err(Error::invalid("both train and test splits must be non-empty"));
    }
    let train_yf: Vec<f64> = train_y.iter().map(|&y| y as f64).collect();
    let selection = select_from_profiles(&train_p, &train_yf, opts.n_heads, opts.n_ffn)?;

    let mut config = RegressionConfig::new(
        opts.alpha,
        opts.beta,
        selection.ffn_layers.iter().map(|r| r.key).collect(),
        selection.copy_heads.iter().map(|r| r.key).collect(),
    );
    config.k_percent = opts.k_percent;
    config.validate(meta.n_layers, meta.n_heads, floor)?;

    let full = (Some(ParamComponent::Pke), Some(ContextComponent::Ece));
    let train_scores: Vec<f64> = train_p
        .iter()
        .map(|p| p.score(&config, full.0, full.1))
        .collect::<Result<_>>()?;
    let test_scores: Vec<f64> = test_p
        .iter()
        .map(|p| p.score(&config, full.0, full.1))
        .collect::<Result<_>>()?;
    let threshold = best_threshold(&train_scores, &train_y)?;
    let test_metrics = evaluate(&test_y, &test_scores, threshold)?;

    let ablation = if weights.is_some() {
        run_ablation((&train_p, &train_y), (&test_p, &test_y), &config)?
    } else {
        Vec::new()
    };

    let test_owned: Vec<RecordProfile> = test_p.iter().map(|p| (*p).clone()).collect();
    let test_yf: Vec<f64> = test_y.iter().map(|&y| y as f64).collect();
    let ece_corr = layer_correlation(&test_owned, &test_yf, CorrelationMode::Ece)?;
    let pke_corr = layer_correlation(&test_owned, &test_yf, CorrelationMode::Pke)?;
    let correlation = CorrelationSummary {
        mean_inverted_ece: mean_corr(&ece_corr, |e| {
            e.head.is_some_and(|h| config.copy_heads.contains(&(e.layer, h)))
        }),
        mean_pke: mean_corr(&pke_corr, |e| config.ffn_layers.contains(&e.layer)),
        ece: ece_corr,
        pke: pke_corr,
    };

    let probe_auc = probe_test_auc(records, traces, &probes, oracle)?;
    let report = PipelineReport {
        options: opts.clone(),
        config: config.clone(),
        selection,
        probe_layers: layers,
        threshold,
        test_metrics,
        ablation,
        correlation,
        probe_auc,
        test_ids: test_idx.iter().map(|&i| records[i].id.clone()).collect(),
        test_scores,
    };
    Ok(PipelineRun {
        report,
        probes,
        config,
    })
}

/// Test-split AUC of each probe against SE binarized at its own threshold.
fn probe_test_auc(
    records: &[DatasetRecord],
    traces: &[ResidualTrace],
    probes: &ProbeSet,
    oracle: &mut dyn EntailmentOracle,
) -> Result<Vec<(usize, Option<f64>)>> {
    let mut se = Vec::new();
    for (r, t) in records.iter().zip(traces).filter(|(r, _)| r.split == Split::Test) {
        if let Some(s) = record_se(r, oracle, SeMode::Standard)? {
            se.push((s, t));
        }
    }
    probes
        .probes()
        .iter()
        .map(|p| {
            let mut scores = Vec::with_capacity(se.len());
            let mut labels = Vec::with_capacity(se.len());
            for (s, t) in &se {
                let last = t.response_position(t.response_len() - 1);
                scores.push(p.predict(t.hidden(Tap::Post, last, p.layer))?);
                labels.push((*s > p.gamma_star) as u8);
            }
            Ok((p.layer, auc(&scores, &labels)?))
        })
        .collect()
}

/// Re-traces `record` with Gaussian noise of scale `sigma` added to every
/// pre-softmax attention logit. `sigma = 0` reproduces the plain trace.
pub fn intervene_attention_noise(
    weights: &DecoderWeights,
    record: &DatasetRecord,
    sigma: f64,
    seed: u64,
) -> Result<ResidualTrace> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let hooks = Hooks {
        attn_noise: Some(AttentionNoise { sigma, seed }),
        ..Hooks::none()
    };
    trace_sequence(weights, &record.context_token_ids, &record.response_token_ids, &hooks)
}

/// Copy of `weights` with the FFNs of `n_layers` randomly chosen layers
/// zeroed, plus the chosen layers in ascending order.
pub fn intervene_ffn_erase(
    weights: &DecoderWeights,
    n_layers: usize,
    seed: u64,
) -> Result<(DecoderWeights, Vec<usize>)> {
    let total = weights.config.n_layers;
    if n_layers > total {
        return Err(Error::invalid(format!("cannot erase {n_layers} of {total} layers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..total).collect();
    let mut chosen: Vec<usize> = all.choose_multiple(&mut rng, n_layers).copied().collect();
    chosen.sort_unstable();
    Ok((weights.with_ffn_erased(&chosen)?, chosen))
}

/// Number of FFNs erased for a model of `n_layers`, scaled from 8 of 32.
pub fn scaled_erase_count(n_layers: usize) -> usize {
    n_layers.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub variance: f64,
    pub scores: Vec<f64>,
}

impl GroupStats {
    fn of(scores: Vec<f64>) -> Result<Self> {
        let m = mean(&scores)?;
        let variance = scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / scores.len() as f64;
        Ok(Self {
            mean: m,
            variance,
            scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub sigma: f64,
    pub erase_count: usize,
    pub seed: u64,
    pub record_ids: Vec<String>,
    pub control: GroupStats,
    pub attention_noise: GroupStats,
    pub ffn_erase: GroupStats,
    /// Erased layers per record.
    pub erased_layers: Vec<Vec<usize>>,
}

impl InterventionReport {
    pub fn variance_ratio(&self) -> f64 {
        self.attention_noise.variance / self.control.variance
    }
}

/// Scores the same records unmodified, with attention noise, and with FFN
/// erasure. Each record uses its own seeded streams, so results do not
/// depend on scheduling.
pub fn run_interventions(
    weights: &DecoderWeights,
    records: &[&DatasetRecord],
    probes: &ProbeSet,
    cfg: &RegressionConfig,
    sigma: f64,
    erase_count: usize,
    seed: u64,
) -> Result<InterventionReport> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let rows: Vec<(f64, f64, f64, Vec<usize>)> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let plain = trace_sequence(weights, &r.context_token_ids, &r.response_token_ids, &Hooks::none())?;
            let noisy = intervene_attention_noise(weights, r, sigma, mix_seed(&[seed, 10, i as u64]))?;
            let (erased, layers) = intervene_ffn_erase(weights, erase_count, mix_seed(&[seed, 11, i as u64]))?;
            let cut = trace_sequence(&erased, &r.context_token_ids, &r.response_token_ids, &Hooks::none())?;
            Ok((
                seredeep_score(&plain, probes, cfg)?.score(),
                seredeep_score(&noisy, probes, cfg)?.score(),
                seredeep_score(&cut, probes, cfg)?.score(),
                layers,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(InterventionReport {
        sigma,
        erase_count,
        seed,
        record_ids: records.iter().map(|r| r.id.clone()).collect(),
        control: GroupStats::of(rows.iter().map(|r| r.0).collect())?,
        attention_noise: GroupStats::of(rows.iter().map(|r| r.1).collect())?,
        ffn_erase: GroupStats::of(rows.iter().map(|r| r.2).collect())?,
        erased_layers: rows.into_iter().map(|r| r.3).collect(),
    })
}

/// Formats rows as a left-aligned plain-text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub fn metrics_row(name: &str, m: &MetricsReport) -> Vec<String> {
    vec![
        name.to_string(),
        format!("{:.4}", m.acc),
        fmt_opt(m.auc),
        format!("{:.4}", m.f1),
        format!("{:.4}", m.recall),
        m.n.to_string(),
    ]
}

pub const METRICS_HEADER: [&str; 6] = ["variant", "ACC", "AUC", "F1", "Rec", "n"];

/// Plain-text rendering of a pipeline report.
pub fn render_pipeline_report(r: &PipelineReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "threshold (fit on train): {:.6}", r.threshold);
    let _ = writeln!(out, "FFN layers: {:?}", r.config.ffn_layers);
    let _ = writeln!(out, "copy heads: {:?}", r.config.copy_heads);
    let _ = writeln!(out);
    let mut rows = vec![metrics_row("score", &r.test_metrics)];
    rows.extend(r.ablation.iter().map(|a| metrics_row(&a.variant, &a.metrics)));
    out.push_str(&format_table(&METRICS_HEADER, &rows));
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "mean Pearson(-ECE, label) over selected heads: {}",
        fmt_opt(r.correlation.mean_inverted_ece)
    );
    let _ = writeln!(
        out,
        "mean Pearson(PKE, label) over selected layers: {}",
        fmt_opt(r.correlation.mean_pke)
    );
    out
}

/// `layer,head,mode,corr` series for plotting correlation by layer.
pub fn correlation_csv(c: &CorrelationSummary) -> String {
    let mut out = String::from("layer,head,mode,corr\n");
    for (mode, entries) in [("neg_ece", &c.ece), ("pke", &c.pke)] {
        for e in entries {
            let head = e.head.map_or_else(|| "all".to_string(), |h| h.to_string());
            let corr = e.corr.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(out, "{},{head},{mode},{corr}", e.layer);
        }
    }
    out
}

/// Plain-text rendering of an intervention report.
pub fn render_intervention_report(r: &InterventionReport) -> String {
    let rows = [
        ("control", &r.control),
        ("attention noise", &r.attention_noise),
        ("ffn erase", &r.ffn_erase),
    ]
    .iter()
    .map(|(n, g)| vec![n.to_string(), format!("{:.6}", g.mean), format!("{:.6}", g.variance), g.scores.len().to_string()])
    .collect::<Vec<_>>();
    let mut out = format_table(&["group", "mean", "variance", "n"], &rows);
    let _ = writeln!(out, "\nsigma {}, erased FFNs per record {}, variance ratio {:.4}", r.sigma, r.erase_count, r.variance_ratio());
    out
}

/// Convenience: the default oracle used for synthetic corpora.
pub fn default_oracle() -> ExactMatchOracle {
    ExactMatchOracle
}
