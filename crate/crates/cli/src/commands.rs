use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use halluscope::decoder::mix_seed;
use halluscope::entropy::{cluster_responses, discrete_se, semantic_entropy, ExactMatchOracle, ExternalOracle};
use halluscope::harness::{
    best_threshold, correlation_csv, evaluate, format_table, generate_corpus_with, intervene_attention_noise,
    metrics_row, planted_model, profile_all, render_intervention_report, run_ablation,
    run_interventions, scaled_erase_count, select_from_profiles, train_probes, CorrelationSummary, Plant,
    PipelineOptions, SynthSpec, METRICS_HEADER,
};
use halluscope::redeep::{generate_mitigated, Selection};
use halluscope::seredeep::{layer_correlation, seredeep_score, ContextComponent, CorrelationMode, ParamComponent};
use halluscope::store::{
    self, load_dataset, read_probes, read_weights, write_dataset, write_probes, write_trace, write_weights,
};
use halluscope::{
    DecoderWeights, EntailmentOracle, MetricsReport, ProbeSet, RecordProfile, RegressionConfig, ResidualTrace,
    DatasetRecord, Mitigation, Split,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::manifest::{OutDir, RunManifest};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_SEED: u64 = 7;

pub fn run(cmd: Command, argv: &[String]) -> Result<()> {
    let (name, common) = match &cmd {
        Command::GenModel(a) => ("gen-model", &a.common),
        Command::GenCorpus(a) => ("gen-corpus", &a.common),
        Command::Trace(a) => ("trace", &a.common),
        Command::Cluster(a) => ("cluster", &a.common),
        Command::Se(a) => ("se", &a.common),
        Command::TrainProbe(a) => ("train-probe", &a.common),
        Command::Score(a) => ("score", &a.common),
        Command::Ablate(a) => ("ablate", &a.common),
        Command::Intervene(a) => ("intervene", &a.common),
        Command::Evaluate(a) => ("evaluate", &a.common),
        Command::Formats(a) => ("formats", &a.common),
    };
    if common.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    // results are collected in order, so the pool size never changes outputs
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build_global()
        .map_err(|e| CliError::data(format!("thread pool: {e}")))?;
    let out = OutDir::create(&common.out)?;
    let mut m = RunManifest::new(name, argv);
    match cmd {
        Command::GenModel(a) => gen_model(a, &out, &mut m)?,
        Command::GenCorpus(a) => gen_corpus(a, &out, &mut m)?,
        Command::Trace(a) => trace(a, &out, &mut m)?,
        Command::Cluster(a) => cluster(a, &out, &mut m)?,
        Command::Se(a) => se(a, &out, &mut m)?,
        Command::TrainProbe(a) => train_probe(a, &out, &mut m)?,
        Command::Score(a) => score(a, &out, &mut m)?,
        Command::Ablate(a) => ablate(a, &out, &mut m)?,
        Command::Intervene(a) => intervene(a, &out, &mut m)?,
        Command::Evaluate(a) => evaluate_cmd(a, &out, &mut m)?,
        Command::Formats(a) => formats(a, &out, &mut m)?,
    }
    out.finish(m)
}

// ---- helpers ----

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| CliError::data(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn load_spec(path: Option<&PathBuf>, seed: Option<u64>, m: &mut RunManifest) -> Result<SynthSpec> {
    let mut spec = match path {
        Some(p) => {
            m.config(p);
            m.input(p)?;
            read_json::<SynthSpec>(p)?
        }
        None => SynthSpec::default_planted(DEFAULT_SEED),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    m.seed("corpus", spec.seed);
    Ok(spec)
}

fn load_model(p: &Path, m: &mut RunManifest) -> Result<DecoderWeights> {
    m.input(p)?;
    Ok(read_weights(p)?)
}

fn load_records(p: &Path, m: &mut RunManifest) -> Result<Vec<DatasetRecord>> {
    m.input(p)?;
    Ok(load_dataset(p)?)
}

/// Reads every record's trace; relative trace paths resolve against the
/// dataset's directory.
fn load_traces(dataset: &Path, records: &[DatasetRecord]) -> Result<Vec<ResidualTrace>> {
    let base = dataset.parent().unwrap_or(Path::new("."));
    records
        .par_iter()
        .map(|r| {
            let rel = r
                .trace_path
                .as_ref()
                .ok_or_else(|| CliError::data(format!("record {} has no trace_path", r.id)))?;
            let t = store::read_trace(&base.join(rel))?;
            if t.meta.context_ids != r.context_token_ids || t.meta.response_ids != r.response_token_ids {
                return Err(CliError::data(format!("trace of record {} does not match its tokens", r.id)));
            }
            Ok(t)
        })
        .collect()
}

fn oracle(judge: &JudgeArgs) -> Result<Box<dyn EntailmentOracle>> {
    if judge.judge_timeout == 0 {
        return Err(CliError::usage("--judge-timeout must be positive"));
    }
    Ok(match ExternalOracle::from_env(Duration::from_secs(judge.judge_timeout))? {
        Some(o) => Box::new(o),
        None => Box::new(ExactMatchOracle),
    })
}

fn trace_file(i: usize) -> String {
    format!("traces/rec-{i:04}.srtr")
}

fn split_idx(records: &[DatasetRecord], s: Split) -> Vec<usize> {
    (0..records.len()).filter(|&i| records[i].split == s).collect()
}

// ---- generation ----

fn gen_model(a: GenModelArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let spec = load_spec(a.spec.as_ref(), a.seed, m)?;
    spec.validate()?;
    let w = planted_model(&spec.model, &spec.gains, spec.seed)?;
    write_weights(&w, &out.path("model.srtr")?)?;
    out.write_json("spec.json", &spec)
}

fn gen_corpus(a: GenCorpusArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let mut spec = load_spec(a.spec.as_ref(), a.seed, m)?;
    if let Some(n) = a.n_records {
        spec.n_records = n;
    }
    if a.null {
        spec.plant = Plant::null();
    }
    spec.validate()?;
    let model = match &a.model {
        Some(p) => load_model(p, m)?,
        None => planted_model(&spec.model, &spec.gains, spec.seed)?,
    };
    let corpus = generate_corpus_with(&spec, model)?;
    let mut records = corpus.records.clone();
    let paths: Vec<PathBuf> = (0..records.len()).map(|i| out.path(&trace_file(i))).collect::<Result<_>>()?;
    corpus
        .traces
        .par_iter()
        .zip(&paths)
        .try_for_each(|(t, p)| write_trace(t, p))?;
    for (i, r) in records.iter_mut().enumerate() {
        r.trace_path = Some(trace_file(i));
    }
    write_dataset(&records, &out.path("dataset.jsonl")?)?;
    write_weights(&corpus.model, &out.path("model.srtr")?)?;
    out.write_json("spec.json", &spec)
}

fn trace(a: TraceArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let w = load_model(&a.model, m)?;
    let mut records = load_records(&a.dataset, m)?;
    m.seed("noise", a.seed);
    let traces: Vec<ResidualTrace> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| intervene_attention_noise(&w, r, a.sigma, mix_seed(&[a.seed, i as u64])))
        .collect::<halluscope::Result<_>>()?;
    for (i, (r, t)) in records.iter_mut().zip(&traces).enumerate() {
        write_trace(t, &out.path(&trace_file(i))?)?;
        r.trace_path = Some(trace_file(i));
    }
    write_dataset(&records, &out.path("dataset.jsonl")?)?;
    Ok(())
}

// ---- semantic entropy ----

#[derive(Serialize)]
struct ClusterRow<'a> {
    id: &'a str,
    n_samples: usize,
    clusters: Vec<Vec<usize>>,
}

fn question(r: &DatasetRecord) -> &str {
    r.extra.get("question").and_then(|q| q.as_str()).unwrap_or("")
}

fn cluster(a: ClusterArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let mut judge = oracle(&a.judge)?;
    let mut rows = Vec::new();
    for r in &records {
        let Some(samples) = r.sampled_responses.as_ref().filter(|s| !s.is_empty()) else {
            log::warn!("record {} has no sampled responses; skipped", r.id);
            continue;
        };
        let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        let c = cluster_responses(question(r), &texts, judge.as_mut())?;
        rows.push(ClusterRow { id: &r.id, n_samples: samples.len(), clusters: c.clusters });
    }
    out.write("clusters.jsonl", jsonl(&rows)?)
}

#[derive(Serialize)]
struct SeRow<'a> {
    id: &'a str,
    split: Split,
    label: u8,
    n_clusters: usize,
    se: f64,
    /// Probability-weighted entropy; absent when token probabilities are.
    se_weighted: Option<f64>,
}

fn se(a: SeArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let mut judge = oracle(&a.judge)?;
    let mut rows = Vec::new();
    for r in &records {
        let Some(samples) = r.sampled_responses.as_ref().filter(|s| s.len() >= 2) else {
            log::warn!("record {} has fewer than 2 sampled responses; skipped", r.id);
            continue;
        };
        let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        let c = cluster_responses(question(r), &texts, judge.as_mut())?;
        rows.push(SeRow {
            id: &r.id,
            split: r.split,
            label: r.hallucination_label,
            n_clusters: c.len(),
            se: discrete_se(&c, samples.len(), a.mode)?,
            se_weighted: semantic_entropy(&c, samples).ok(),
        });
    }
    out.write("se.jsonl", jsonl(&rows)?)
}

// ---- probes ----

#[derive(Serialize)]
struct ProbeSummary {
    layer: usize,
    gamma_star: f64,
    n_samples: usize,
}

fn train_probe(a: TrainProbeArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let traces = load_traces(&a.dataset, &records)?;
    let meta = &traces.first().ok_or_else(|| CliError::data("empty dataset"))?.meta;
    let floor = a.layer_floor.unwrap_or(meta.min_score_layer);
    if floor >= meta.n_layers {
        return Err(CliError::usage(format!("--layer-floor {floor} beyond the model's {} layers", meta.n_layers)));
    }
    let layers: Vec<usize> = (floor..meta.n_layers).collect();
    m.seed("probe", a.seed);
    let opts = PipelineOptions {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        layer_floor: Some(floor),
        se_mode: a.mode,
        ..Default::default()
    };
    let mut judge = oracle(&a.judge)?;
    let probes = train_probes(&records, &traces, &layers, &opts, judge.as_mut())?;
    write_probes(&probes, &out.path("probes.srtr")?)?;
    let summary: Vec<ProbeSummary> = probes
        .probes()
        .iter()
        .map(|p| ProbeSummary { layer: p.layer, gamma_star: p.gamma_star, n_samples: p.train_meta.n_samples })
        .collect();
    out.write_json("probes.json", &summary)
}

// ---- scoring ----

/// A regression config plus the profiles it was fit and scored on.
struct Fitted {
    config: RegressionConfig,
    selection: Option<Selection>,
    profiles: Vec<RecordProfile>,
}

fn fit_regression(
    reg: &RegressionArgs,
    records: &[DatasetRecord],
    traces: &[ResidualTrace],
    probes: &ProbeSet,
    weights: Option<&DecoderWeights>,
    m: &mut RunManifest,
) -> Result<Fitted> {
    let meta = &traces.first().ok_or_else(|| CliError::data("empty dataset"))?.meta;
    let floor = reg.layer_floor.unwrap_or(meta.min_score_layer);
    let layers: Vec<usize> = probes.layers().into_iter().filter(|&l| l >= floor && l < meta.n_layers).collect();
    if layers.is_empty() {
        return Err(CliError::usage(format!("no probe layers at or above layer floor {floor}")));
    }
    let file: Option<RegressionConfig> = match &reg.config {
        Some(p) => {
            m.config(p);
            m.input(p)?;
            Some(read_json(p)?)
        }
        None => None,
    };
    let defaults = PipelineOptions::default();
    let k = reg.k_percent.or(file.as_ref().map(|c| c.k_percent)).unwrap_or(defaults.k_percent);
    if !(k > 0.0 && k <= 100.0) {
        return Err(CliError::usage(format!("--k-percent must lie in (0, 100], got {k}")));
    }
    let profiles = profile_all(traces, probes, weights, &layers, k)?;

    let (mut config, selection) = match file {
        Some(c) => (c, None),
        None => {
            let train = split_idx(records, Split::Train);
            if train.len() < 2 {
                return Err(CliError::data("selection needs at least 2 training records"));
            }
            let ps: Vec<&RecordProfile> = train.iter().map(|&i| &profiles[i]).collect();
            let ys: Vec<f64> = train.iter().map(|&i| records[i].hallucination_label as f64).collect();
            let sel = select_from_profiles(&ps, &ys, reg.n_heads, reg.n_ffn)?;
            let c = RegressionConfig::new(
                defaults.alpha,
                defaults.beta,
                sel.ffn_layers.iter().map(|r| r.key).collect(),
                sel.copy_heads.iter().map(|r| r.key).collect(),
            );
            (c, Some(sel))
        }
    };
    config.k_percent = k;
    if let Some(v) = reg.alpha {
        config.alpha = v;
    }
    if let Some(v) = reg.beta {
        config.beta = v;
    }
    if reg.mu.is_some() || reg.nu.is_some() || reg.tau.is_some() {
        let base = config.mitigation;
        let pick = |flag: Option<f64>, from: fn(&Mitigation) -> f64, name: &str| {
            flag.or(base.as_ref().map(from))
                .ok_or_else(|| CliError::usage(format!("mitigation needs --{name} (or a config block)")))
        };
        config.mitigation = Some(Mitigation {
            mu: pick(reg.mu, |b| b.mu, "mu")?,
            nu: pick(reg.nu, |b| b.nu, "nu")?,
            tau: pick(reg.tau, |b| b.tau, "tau")?,
        });
    }
    config.validate(meta.n_layers, meta.n_heads, floor)?;
    for &l in config.ffn_layers.iter().chain(config.copy_heads.iter().map(|(l, _)| l)) {
        if !layers.contains(&l) {
            return Err(CliError::data(format!("no probe for configured layer {l}")));
        }
    }
    Ok(Fitted { config, selection, profiles })
}

fn load_probes(p: &Path, m: &mut RunManifest) -> Result<ProbeSet> {
    m.input(p)?;
    Ok(read_probes(p)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    split: Split,
    label: u8,
    score: f64,
}

const FULL: (Option<ParamComponent>, Option<ContextComponent>) = (Some(ParamComponent::Pke), Some(ContextComponent::Ece));

fn score(a: ScoreArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let traces = load_traces(&a.dataset, &records)?;
    let probes = load_probes(&a.reg.probes, m)?;
    let fit = fit_regression(&a.reg, &records, &traces, &probes, None, m)?;
    let rows: Vec<ScoreRow> = records
        .iter()
        .zip(&fit.profiles)
        .map(|(r, p)| {
            Ok(ScoreRow {
                id: r.id.clone(),
                split: r.split,
                label: r.hallucination_label,
                score: p.score(&fit.config, FULL.0, FULL.1)?,
            })
        })
        .collect::<halluscope::Result<_>>()?;
    out.write("scores.jsonl", jsonl(&rows)?)?;
    if let Some(sel) = &fit.selection {
        out.write_json("selection.json", sel)?;
    }
    out.write_json("regression.json", &fit.config)
}

#[derive(Serialize)]
struct EvalReport {
    threshold: f64,
    threshold_source: &'static str,
    evaluated_split: &'static str,
    metrics: MetricsReport,
}

fn evaluate_cmd(a: EvaluateArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    m.input(&a.scores)?;
    let text = fs::read_to_string(&a.scores).map_err(|e| CliError::data(format!("{}: {e}", a.scores.display())))?;
    let rows: Vec<ScoreRow> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("line {}: {e}", i + 1))))
        .collect::<Result<_>>()?;
    let pick = |s: Split| -> (Vec<f64>, Vec<u8>) {
        rows.iter().filter(|r| r.split == s).map(|r| (r.score, r.label)).unzip()
    };
    let (train_s, train_y) = pick(Split::Train);
    let (mut test_s, mut test_y) = pick(Split::Test);
    let mut evaluated = "test";
    if test_s.is_empty() {
        evaluated = "all";
        test_s = rows.iter().map(|r| r.score).collect();
        test_y = rows.iter().map(|r| r.label).collect();
    }
    let (threshold, source) = match a.threshold {
        Some(t) => (t, "flag"),
        None if !train_s.is_empty() => (best_threshold(&train_s, &train_y)?, "train split"),
        None => return Err(CliError::data("no training rows to fit a threshold on; pass --threshold")),
    };
    let metrics = evaluate(&test_y, &test_s, threshold)?;
    let mut txt = format_table(&METRICS_HEADER, &[metrics_row("PKE + ECE", &metrics)]);
    let _ = writeln!(txt, "\nthreshold {threshold:.6} (from {source}), evaluated on {evaluated} rows");
    print!("{txt}");
    out.write("report.txt", txt)?;
    out.write_json("report.json", &EvalReport { threshold, threshold_source: source, evaluated_split: evaluated, metrics })
}

fn ablate(a: AblateArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let traces = load_traces(&a.dataset, &records)?;
    let probes = load_probes(&a.reg.probes, m)?;
    let w = load_model(&a.model, m)?;
    let fit = fit_regression(&a.reg, &records, &traces, &probes, Some(&w), m)?;
    let part = |s: Split| -> (Vec<&RecordProfile>, Vec<u8>) {
        split_idx(&records, s).iter().map(|&i| (&fit.profiles[i], records[i].hallucination_label)).unzip()
    };
    let (train_p, train_y) = part(Split::Train);
    let (test_p, test_y) = part(Split::Test);
    if train_p.is_empty() || test_p.is_empty() {
        return Err(CliError::data("ablation needs both train and test records"));
    }
    let rows = run_ablation((&train_p, &train_y), (&test_p, &test_y), &fit.config)?;
    let table: Vec<Vec<String>> = rows.iter().map(|r| metrics_row(&r.variant, &r.metrics)).collect();
    let txt = format_table(&METRICS_HEADER, &table);
    print!("{txt}");
    out.write("ablation.txt", &txt)?;
    out.write_json("ablation.json", &rows)?;

    let owned: Vec<RecordProfile> = test_p.iter().map(|p| (*p).clone()).collect();
    let yf: Vec<f64> = test_y.iter().map(|&y| y as f64).collect();
    let ece = layer_correlation(&owned, &yf, CorrelationMode::Ece)?;
    let pke = layer_correlation(&owned, &yf, CorrelationMode::Pke)?;
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let cfg = &fit.config;
    let summary = CorrelationSummary {
        mean_inverted_ece: mean(
            ece.iter()
                .filter(|e| e.head.is_some_and(|h| cfg.copy_heads.contains(&(e.layer, h))))
                .filter_map(|e| e.corr)
                .collect(),
        ),
        mean_pke: mean(pke.iter().filter(|e| cfg.ffn_layers.contains(&e.layer)).filter_map(|e| e.corr).collect()),
        ece,
        pke,
    };
    out.write("correlation.csv", correlation_csv(&summary))?;
    out.write_json("correlation.json", &summary)?;
    out.write_json("regression.json", &fit.config)
}

#[derive(Serialize)]
struct MitigationRow<'a> {
    id: &'a str,
    tokens: Vec<u32>,
    token_scores: Vec<f64>,
    mitigated: Vec<bool>,
}

fn intervene(a: InterveneArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    let records = load_records(&a.dataset, m)?;
    let traces = load_traces(&a.dataset, &records)?;
    let probes = load_probes(&a.reg.probes, m)?;
    let w = load_model(&a.model, m)?;
    let fit = fit_regression(&a.reg, &records, &traces, &probes, None, m)?;
    m.seed("intervention", a.seed);
    let mut idx = split_idx(&records, Split::Test);
    if idx.is_empty() {
        idx = (0..records.len()).collect();
    }
    let recs: Vec<&DatasetRecord> = idx.iter().map(|&i| &records[i]).collect();
    let erase = a.erase.unwrap_or_else(|| scaled_erase_count(w.config.n_layers));
    let mut plain_cfg = fit.config.clone();
    plain_cfg.mitigation = None;
    let report = run_interventions(&w, &recs, &probes, &plain_cfg, a.sigma, erase, a.seed)?;
    let txt = render_intervention_report(&report);
    print!("{txt}");
    out.write("interventions.txt", &txt)?;
    out.write_json("interventions.json", &report)?;
    out.write_json("regression.json", &fit.config)?;

    if let Some(n) = a.generate {
        if fit.config.mitigation.is_none() {
            return Err(CliError::usage("--generate needs --mu, --nu and --tau (or a config mitigation block)"));
        }
        let rows: Vec<MitigationRow> = recs
            .par_iter()
            .map(|r| {
                let g = generate_mitigated(&w, &r.context_token_ids, n, &fit.config, |t| {
                    let b = seredeep_score(t, &probes, &plain_cfg)?;
                    Ok(*b.terms.tokens.last().expect("at least one response token"))
                })?;
                Ok(MitigationRow { id: &r.id, tokens: g.tokens, token_scores: g.token_scores, mitigated: g.mitigated })
            })
            .collect::<halluscope::Result<_>>()?;
        out.write("mitigation.jsonl", jsonl(&rows)?)?;
    }
    Ok(())
}

// ---- inspection ----

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize)]
#[serde(tag = "format", rename_all = "snake_case")]
enum Inspection {
    Container { kind: String, meta: serde_json::Value, tensors: Vec<TensorInfo> },
    Dataset { records: usize, label_1: usize, train: usize, test: usize, with_samples: usize, with_traces: usize },
}

fn formats(a: FormatsArgs, out: &OutDir, m: &mut RunManifest) -> Result<()> {
    m.input(&a.input)?;
    let bytes = fs::read(&a.input).map_err(|e| CliError::data(format!("{}: {e}", a.input.display())))?;
    let info = if bytes.starts_with(store::MAGIC) {
        let c = store::Container::from_bytes(&bytes)?;
        // decode the typed payload too, so shape errors surface here
        match c.kind.as_str() {
            store::KIND_TRACE => drop(store::trace_from_container(&c)?),
            store::KIND_MODEL => drop(store::weights_from_container(&c)?),
            store::KIND_PROBES => drop(store::probes_from_container(&c)?),
            other => log::warn!("unknown container kind {other:?}; header only"),
        }
        Inspection::Container {
            kind: c.kind.clone(),
            meta: c.meta.clone(),
            tensors: c.tensors.iter().map(|t| TensorInfo { name: t.name.clone(), shape: t.shape.clone() }).collect(),
        }
    } else {
        let text = String::from_utf8(bytes).map_err(|_| CliError::data("neither a container nor UTF-8 text"))?;
        let recs = store::parse_dataset(&text)?;
        let count = |f: &dyn Fn(&DatasetRecord) -> bool| recs.iter().filter(|r| f(r)).count();
        Inspection::Dataset {
            records: recs.len(),
            label_1: count(&|r| r.hallucination_label == 1),
            train: count(&|r| r.split == Split::Train),
            test: count(&|r| r.split == Split::Test),
            with_samples: count(&|r| r.sampled_responses.is_some()),
            with_traces: count(&|r| r.trace_path.is_some()),
        }
    };
    let s = serde_json::to_string_pretty(&info).map_err(|e| CliError::data(e.to_string()))?;
    println!("{s}");
    out.write_json("inspect.json", &info)
}
