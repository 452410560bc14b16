//! Binary tensor container and line-delimited dataset files.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "SRTR" | version: u32 | header_len: u32 | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is `{"kind", "meta", "tensors": [{"name", "shape", "dtype"}]}`
//! and the payload concatenates each tensor as row-major little-endian `f32`
//! in descriptor order. See `docs/formats.md`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::{DecoderWeights, LayerWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::probe::{ProbeModel, ProbeSet, TrainMeta};
use crate::tensor::Matrix;
use crate::trace::{ResidualTrace, TraceMeta};

pub const MAGIC: &[u8; 4] = b"SRTR";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_TRACE: &str = "trace";
pub const KIND_MODEL: &str = "model";
pub const KIND_PROBES: &str = "probes";

/// Upper bound on a header, to reject garbage lengths before allocating.
const MAX_HEADER_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorDesc {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    /// Wraps `f64` values, rounding each to `f32`.
    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorDesc>,
}

/// A decoded container: a kind tag, free-form metadata and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.to_f64())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor {:?} declares {numel} values but holds {}",
                    t.name,
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorDesc {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not an SRTR container".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Format("truncated container preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if header_len > MAX_HEADER_LEN || 12 + header_len as usize > bytes.len() {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size"
            )));
        }
        let header_end = 12 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;

        let mut names = HashSet::new();
        let mut expected = 0usize;
        for d in &header.tensors {
            if d.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {:?} has unsupported dtype {:?}",
                    d.name, d.dtype
                )));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", d.name)));
            }
            expected = d
                .numel()
                .checked_mul(4)
                .and_then(|b| expected.checked_add(b))
                .ok_or_else(|| Error::Format("tensor sizes overflow".into()))?;
        }
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(Error::CorruptPayload {
                expected,
                found: payload.len(),
            });
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut offset = 0;
        for d in header.tensors {
            let n = d.numel();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            tensors.push(Tensor {
                name: d.name,
                shape: d.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn write_container(c: &Container, path: &Path) -> Result<()> {
    let bytes = c.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    Container::from_bytes(&bytes)
}

fn meta_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn meta_from<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("bad meta: {e}")))
}

// ---- traces ----

pub fn trace_to_container(trace: &ResidualTrace) -> Result<Container> {
    trace.validate()?;
    let m = &trace.meta;
    let (t, l, h, d) = (m.total_len(), m.n_layers, m.n_heads, m.d_model);
    let mut c = Container::new(KIND_TRACE, meta_value(m)?);
    c.push(Tensor::from_f64("x_pre", vec![t, l, d], &trace.x_pre));
    c.push(Tensor::from_f64("x_attn", vec![t, l, d], &trace.x_attn));
    c.push(Tensor::from_f64("x_post", vec![t, l, d], &trace.x_post));
    c.push(Tensor::from_f64("attn", vec![m.response_len, l, h, m.context_len], &trace.attn));
    c.push(Tensor::from_f64("token_logprob", vec![m.response_len], &trace.token_logprob));
    Ok(c)
}

pub fn trace_from_container(c: &Container) -> Result<ResidualTrace> {
    c.expect_kind(KIND_TRACE)?;
    let meta: TraceMeta = meta_from(&c.meta)?;
    let (t, l, h, d) = (meta.total_len(), meta.n_layers, meta.n_heads, meta.d_model);
    let trace = ResidualTrace {
        x_pre: c.expect("x_pre", &[t, l, d])?,
        x_attn: c.expect("x_attn", &[t, l, d])?,
        x_post: c.expect("x_post", &[t, l, d])?,
        attn: c.expect("attn", &[meta.response_len, l, h, meta.context_len])?,
        token_logprob: c.expect("token_logprob", &[meta.response_len])?,
        meta,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn write_trace(trace: &ResidualTrace, path: &Path) -> Result<()> {
    write_container(&trace_to_container(trace)?, path)
}

pub fn read_trace(path: &Path) -> Result<ResidualTrace> {
    trace_from_container(&read_container(path)?)
}

// ---- model weights ----

fn mat(name: String, m: &Matrix) -> Tensor {
    Tensor::from_f64(name, vec![m.rows(), m.cols()], m.data())
}

pub fn weights_to_container(w: &DecoderWeights) -> Result<Container> {
    w.validate()?;
    let cfg = &w.config;
    let mut c = Container::new(KIND_MODEL, meta_value(cfg)?);
    c.push(mat("emb".into(), &w.emb));
    c.push(mat("pos".into(), &w.pos));
    c.push(mat("unemb".into(), &w.unemb));
    c.push(Tensor::from_f64("unemb_bias", vec![cfg.vocab_size], &w.unemb_bias));
    for (l, lw) in w.layers.iter().enumerate() {
        for (h, m) in lw.wq.iter().enumerate() {
            c.push(mat(format!("wq.{l}.{h}"), m));
        }
        for (g, m) in lw.wk.iter().enumerate() {
            c.push(mat(format!("wk.{l}.{g}"), m));
        }
        for (g, m) in lw.wv.iter().enumerate() {
            c.push(mat(format!("wv.{l}.{g}"), m));
        }
        for (h, m) in lw.wo.iter().enumerate() {
            c.push(mat(format!("wo.{l}.{h}"), m));
        }
        c.push(mat(format!("ffn1.{l}"), &lw.ffn1));
        c.push(Tensor::from_f64(format!("b1.{l}"), vec![cfg.d_ff], &lw.b1));
        c.push(mat(format!("ffn2.{l}"), &lw.ffn2));
        c.push(Tensor::from_f64(format!("b2.{l}"), vec![cfg.d_model], &lw.b2));
        for s in 0..2 {
            c.push(Tensor::from_f64(format!("ln_g.{l}.{s}"), vec![cfg.d_model], &lw.ln_g[s]));
            c.push(Tensor::from_f64(format!("ln_b.{l}.{s}"), vec![cfg.d_model], &lw.ln_b[s]));
        }
    }
    Ok(c)
}

pub fn weights_from_container(c: &Container) -> Result<DecoderWeights> {
    c.expect_kind(KIND_MODEL)?;
    let cfg: ModelConfig = meta_from(&c.meta)?;
    cfg.validate()?;
    let get_mat = |name: &str, r: usize, cols: usize| -> Result<Matrix> {
        Matrix::from_vec(r, cols, c.expect(name, &[r, cols])?)
    };
    let (d, dh, ff) = (cfg.d_model, cfg.d_head, cfg.d_ff);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let heads = |prefix: &str, n: usize, r: usize, cols: usize| -> Result<Vec<Matrix>> {
            (0..n).map(|i| get_mat(&format!("{prefix}.{l}.{i}"), r, cols)).collect()
        };
        let ln = |prefix: &str, s: usize| c.expect(&format!("{prefix}.{l}.{s}"), &[d]);
        layers.push(LayerWeights {
            wq: heads("wq", cfg.n_heads, d, dh)?,
            wk: heads("wk", cfg.n_kv_heads(), d, dh)?,
            wv: heads("wv", cfg.n_kv_heads(), d, dh)?,
            wo: heads("wo", cfg.n_heads, dh, d)?,
            ffn1: get_mat(&format!("ffn1.{l}"), ff, d)?,
            b1: c.expect(&format!("b1.{l}"), &[ff])?,
            ffn2: get_mat(&format!("ffn2.{l}"), d, ff)?,
            b2: c.expect(&format!("b2.{l}"), &[d])?,
            ln_g: [ln("ln_g", 0)?, ln("ln_g", 1)?],
            ln_b: [ln("ln_b", 0)?, ln("ln_b", 1)?],
        });
    }
    let w = DecoderWeights {
        emb: get_mat("emb", cfg.vocab_size, d)?,
        pos: get_mat("pos", cfg.max_positions, d)?,
        unemb: get_mat("unemb", cfg.vocab_size, d)?,
        unemb_bias: c.expect("unemb_bias", &[cfg.vocab_size])?,
        layers,
        config: cfg,
    };
    w.validate()?;
    Ok(w)
}

pub fn write_weights(w: &DecoderWeights, path: &Path) -> Result<()> {
    write_container(&weights_to_container(w)?, path)
}

pub fn read_weights(path: &Path) -> Result<DecoderWeights> {
    weights_from_container(&read_container(path)?)
}

// ---- probes ----

#[derive(Serialize, Deserialize)]
struct ProbeEntry {
    layer: usize,
    bias: f64,
    gamma_star: f64,
    train_meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    d_model: usize,
    probes: Vec<ProbeEntry>,
}

pub fn probes_to_container(set: &ProbeSet) -> Result<Container> {
    set.validate()?;
    let meta = ProbeMeta {
        d_model: set.d_model(),
        probes: set
            .probes()
            .iter()
            .map(|p| ProbeEntry {
                layer: p.layer,
                bias: p.bias,
                gamma_star: p.gamma_star,
                train_meta: p.train_meta.clone(),
            })
            .collect(),
    };
    let mut c = Container::new(KIND_PROBES, meta_value(&meta)?);
    let d = set.d_model();
    for p in set.probes() {
        c.push(Tensor::from_f64(format!("w.{}", p.layer), vec![d], &p.weights));
        c.push(Tensor::from_f64(format!("mean.{}", p.layer), vec![d], &p.feature_mean));
        c.push(Tensor::from_f64(format!("std.{}", p.layer), vec![d], &p.feature_std));
    }
    Ok(c)
}

pub fn probes_from_container(c: &Container) -> Result<ProbeSet> {
    c.expect_kind(KIND_PROBES)?;
    let meta: ProbeMeta = meta_from(&c.meta)?;
    let d = meta.d_model;
    let probes = meta
        .probes
        .into_iter()
        .map(|e| {
            Ok(ProbeModel {
                layer: e.layer,
                weights: c.expect(&format!("w.{}", e.layer), &[d])?,
                feature_mean: c.expect(&format!("mean.{}", e.layer), &[d])?,
                feature_std: c.expect(&format!("std.{}", e.layer), &[d])?,
                bias: e.bias,
                gamma_star: e.gamma_star,
                train_meta: e.train_meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProbeSet::new(probes)
}

pub fn write_probes(set: &ProbeSet, path: &Path) -> Result<()> {
    write_container(&probes_to_container(set)?, path)
}

pub fn read_probes(path: &Path) -> Result<ProbeSet> {
    probes_from_container(&read_container(path)?)
}

// ---- datasets ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub text: String,
    /// Conditional probability of each generated token.
    pub token_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub context_token_ids: Vec<u32>,
    pub response_token_ids: Vec<u32>,
    pub response_text: String,
    pub hallucination_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampled_responses: Option<Vec<SampledResponse>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    pub split: Split,
    /// Fields this reader does not know; kept so records round-trip.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl DatasetRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.hallucination_label > 1 {
            return Err(format!(
                "hallucination_label must be 0 or 1, got {}",
                self.hallucination_label
            ));
        }
        for (i, s) in self.sampled_responses.iter().flatten().enumerate() {
            if let Some(p) = s.token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err(format!(
                    "sampled_responses[{i}] has probability {p} outside (0, 1]"
                ));
            }
        }
        Ok(())
    }
}

/// Parses JSON-lines records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|message| Error::Parse {
            line: i + 1,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    parse_lines(BufReader::new(f).lines().map(|l| l.map_err(|e| Error::io_at(path, e))))
}

pub fn dataset_to_string(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let text = dataset_to_string(records)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io_at(path, e))
}
