//! Semantic clustering of sampled answers by bidirectional entailment, and
//! the entropies defined over those clusters.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::SampledResponse;
use crate::tensor::{entropy_bits, log_sum_exp, ProbVec};

/// Frozen entailment prompt, version 1.
pub const ENTAILMENT_PROMPT_V1: &str = include_str!("../resources/entailment_prompt_v1.txt");

/// Environment variable naming the external judge command.
pub const JUDGE_CMD_ENV: &str = "HALLUSCOPE_JUDGE_CMD";

pub const DEFAULT_JUDGE_TIMEOUT: Duration = Duration::from_secs(30);

/// Substitutes `{Question}`, `{Answer 1}` and `{Answer 2}` in one pass, so
/// placeholder-like text inside the inputs is left alone.
pub fn render_entailment_prompt(question: &str, a: &str, b: &str) -> String {
    let mut out = String::with_capacity(ENTAILMENT_PROMPT_V1.len() + question.len() + a.len() + b.len());
    let mut rest = ENTAILMENT_PROMPT_V1;
    let slots = [("{Question}", question), ("{Answer 1}", a), ("{Answer 2}", b)];
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match slots.iter().find(|(k, _)| tail.starts_with(k)) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Judge output for an ordered answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Verdict {
    Bidirectional = 0,
    /// Answer 2 entails answer 1.
    BEntailsA = 1,
    /// Answer 1 entails answer 2.
    AEntailsB = 2,
    Unrelated = 3,
}

impl TryFrom<u8> for Verdict {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Verdict::Bidirectional),
            1 => Ok(Verdict::BEntailsA),
            2 => Ok(Verdict::AEntailsB),
            3 => Ok(Verdict::Unrelated),
            _ => Err(format!("verdict {v} outside 0..=3")),
        }
    }
}

impl From<Verdict> for u8 {
    fn from(v: Verdict) -> u8 {
        v as u8
    }
}

impl Verdict {
    /// Strict parse of a judge reply: one digit, surrounding whitespace allowed.
    pub fn parse_reply(line: &str) -> Result<Self> {
        let t = line.trim();
        if t.len() == 1 {
            if let Ok(v) = t.parse::<u8>() {
                return Verdict::try_from(v).map_err(Error::OracleProtocol);
            }
        }
        Err(Error::OracleProtocol(format!("unparseable verdict {line:?}")))
    }
}

/// Anything that can judge entailment between two answers to a question.
pub trait EntailmentOracle {
    fn judge(&mut self, question: &str, a: &str, b: &str) -> Result<Verdict>;
}

/// Lowercases, trims and strips trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Bidirectional iff the normalized answers are equal.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatchOracle;

impl EntailmentOracle for ExactMatchOracle {
    fn judge(&mut self, _q: &str, a: &str, b: &str) -> Result<Verdict> {
        Ok(if normalize_answer(a) == normalize_answer(b) {
            Verdict::Bidirectional
        } else {
            Verdict::Unrelated
        })
    }
}

/// Replays a fixed table of verdicts keyed by answer text. Identical
/// answers are always bidirectional; unknown pairs fall back to `default`.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    table: HashMap<(String, String), Verdict>,
    default: Verdict,
    /// Pairs judged so far, in call order.
    pub transcript: Vec<(String, String, Verdict)>,
}

impl ScriptedOracle {
    pub fn new(default: Verdict) -> Self {
        Self {
            table: HashMap::new(),
            default,
            transcript: Vec::new(),
        }
    }

    /// Records `verdict` for `(a, b)`; `(b, a)` gets the mirrored verdict.
    pub fn insert(&mut self, a: &str, b: &str, verdict: Verdict) {
        let mirrored = match verdict {
            Verdict::BEntailsA => Verdict::AEntailsB,
            Verdict::AEntailsB => Verdict::BEntailsA,
            v => v,
        };
        self.table.insert((a.to_string(), b.to_string()), verdict);
        self.table.insert((b.to_string(), a.to_string()), mirrored);
    }
}

impl EntailmentOracle for ScriptedOracle {
    fn judge(&mut self, _q: &str, a: &str, b: &str) -> Result<Verdict> {
        let v = if a == b {
            Verdict::Bidirectional
        } else {
            self.table
                .get(&(a.to_string(), b.to_string()))
                .copied()
                .unwrap_or(self.default)
        };
        self.transcript.push((a.to_string(), b.to_string(), v));
        Ok(v)
    }
}

/// One request line of the judge protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub a: String,
    pub b: String,
    /// The rendered frozen prompt, for judges that forward it to a model.
    pub prompt: String,
}

/// A long-lived judge subprocess speaking the line protocol: one JSON
/// request per line on stdin, one verdict digit per line on stdout.
pub struct ExternalOracle {
    child: Child,
    stdin: Option<ChildStdin>,
    replies: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("pid", &self.child.id())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalOracle {
    /// Starts `command` through `sh -c`.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            replies: rx,
            timeout,
        })
    }

    /// Starts the command named by `HALLUSCOPE_JUDGE_CMD`, if set.
    pub fn from_env(timeout: Duration) -> Result<Option<Self>> {
        match std::env::var(JUDGE_CMD_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => Self::spawn(&cmd, timeout).map(Some),
            _ => Ok(None),
        }
    }
}

impl EntailmentOracle for ExternalOracle {
    fn judge(&mut self, question: &str, a: &str, b: &str) -> Result<Verdict> {
        let req = JudgeRequest {
            question: question.into(),
            a: a.into(),
            b: b.into(),
            prompt: render_entailment_prompt(question, a, b),
        };
        let mut line = serde_json::to_string(&req).map_err(|e| Error::OracleProtocol(e.to_string()))?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::OracleProtocol("judge stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::OracleProtocol(format!("writing to judge: {e}")))?;
        match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Verdict::parse_reply(&reply),
            Ok(Err(e)) => Err(Error::OracleProtocol(format!("reading from judge: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::OracleTimeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::OracleProtocol("judge exited without replying".into()))
            }
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        // closing stdin lets well-behaved judges exit on their own
        drop(self.stdin.take());
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Two judges combined by conjunction: bidirectional only if both say so.
pub struct DualOracle<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: EntailmentOracle, B: EntailmentOracle> EntailmentOracle for DualOracle<A, B> {
    fn judge(&mut self, q: &str, a: &str, b: &str) -> Result<Verdict> {
        let v1 = self.first.judge(q, a, b)?;
        let v2 = self.second.judge(q, a, b)?;
        Ok(match (v1, v2) {
            (Verdict::Bidirectional, Verdict::Bidirectional) => Verdict::Bidirectional,
            (Verdict::Bidirectional, other) => other,
            (other, _) => other,
        })
    }
}

impl<T: EntailmentOracle + ?Sized> EntailmentOracle for Box<T> {
    fn judge(&mut self, q: &str, a: &str, b: &str) -> Result<Verdict> {
        (**self).judge(q, a, b)
    }
}

/// A partition of response indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterSet {
    /// Checks that clusters are non-empty and partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::invalid("empty cluster"));
            }
            for &i in c {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} repeated or out of range")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("clusters do not cover every response"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Cluster id of every response.
    pub fn assignments(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_items()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = c;
            }
        }
        out
    }
}

/// Greedy single pass: each response joins the first cluster whose first
/// member it is bidirectionally equivalent to, else opens a new cluster.
pub fn cluster_responses<O: EntailmentOracle + ?Sized>(
    question: &str,
    responses: &[&str],
    oracle: &mut O,
) -> Result<ClusterSet> {
    if responses.is_empty() {
        return Err(Error::invalid("no responses to cluster"));
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, r) in responses.iter().enumerate() {
        let mut placed = false;
        for c in clusters.iter_mut() {
            let rep = c[0];
            let v = oracle
                .judge(question, responses[rep], r)
                .map_err(|e| Error::Oracle {
                    a: rep,
                    b: i,
                    message: e.to_string(),
                })?;
            if v == Verdict::Bidirectional {
                c.push(i);
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push(vec![i]);
        }
    }
    Ok(ClusterSet { clusters })
}

/// `sum log p_i` over the response's token probabilities.
pub fn sequence_logprob(r: &SampledResponse) -> Result<f64> {
    if r.token_probs.is_empty() {
        return Err(Error::invalid("response has no token probabilities"));
    }
    let mut s = 0.0;
    for &p in &r.token_probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("token probability {p} outside (0, 1]")));
        }
        s += p.ln();
    }
    Ok(s)
}

/// Entropy (bits) of the renormalized cluster probability masses.
pub fn semantic_entropy(clusters: &ClusterSet, responses: &[SampledResponse]) -> Result<f64> {
    clusters.validate(responses.len())?;
    let logp = responses
        .iter()
        .map(sequence_logprob)
        .collect::<Result<Vec<_>>>()?;
    let cluster_log: Vec<f64> = clusters
        .clusters
        .iter()
        .map(|c| log_sum_exp(&c.iter().map(|&i| logp[i]).collect::<Vec<_>>()))
        .collect();
    let total = log_sum_exp(&cluster_log);
    if !total.is_finite() {
        return Err(Error::DegenerateSample("all cluster masses are zero".into()));
    }
    let probs: Vec<f64> = cluster_log.iter().map(|l| (l - total).exp()).collect();
    Ok(entropy_bits(&ProbVec::from_masses(&probs)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    /// Entropy of cluster frequencies.
    #[default]
    Standard,
    /// Frequency entropy additionally scaled by `1 / |C|`.
    PaperLiteral,
}

impl FromStr for SeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SeMode::Standard),
            "paper_literal" => Ok(SeMode::PaperLiteral),
            _ => Err(Error::Config(format!(
                "unknown SE mode {s:?} (expected standard or paper_literal)"
            ))),
        }
    }
}

impl fmt::Display for SeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMode::Standard => "standard",
            SeMode::PaperLiteral => "paper_literal",
        })
    }
}

/// Monte Carlo semantic entropy from cluster sizes alone.
pub fn discrete_se(clusters: &ClusterSet, n_samples: usize, mode: SeMode) -> Result<f64> {
    if clusters.is_empty() {
        return Err(Error::invalid("no clusters"));
    }
    clusters.validate(n_samples)?;
    let probs: Vec<f64> = clusters
        .clusters
        .iter()
        .map(|c| c.len() as f64 / n_samples as f64)
        .collect();
    let h = entropy_bits(&ProbVec::from_masses(&probs)?);
    Ok(match mode {
        SeMode::Standard => h,
        SeMode::PaperLiteral => h / clusters.len() as f64,
    })
}
