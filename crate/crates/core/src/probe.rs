//! Linear probes that predict whether a hidden state comes from a
//! high-semantic-entropy generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

pub const DEFAULT_EPOCHS: usize = 500;
pub const DEFAULT_LR: f64 = 0.1;
pub const L2_PENALTY: f64 = 1e-3;

/// Splits 1-D values into two groups at the midpoint threshold minimizing
/// total within-group squared error. Ties go to the lower threshold.
pub fn two_means_threshold(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::DegenerateSample("fewer than two distinct values".into()));
    }
    let mut all = values.to_vec();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    // prefix sums for O(1) group SSE
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, v) in all.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a]) - s * s / m
    };
    let mut best: Option<(f64, f64)> = None;
    for w in sorted.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let k = all.partition_point(|v| *v <= w[0]);
        let cost = sse(0, k) + sse(k, n);
        // a relative slack absorbs rounding between equal-cost splits
        if best.is_none_or(|(c, _)| cost < c - 1e-12 * c.abs().max(1.0)) {
            best = Some((cost, t));
        }
    }
    Ok(best.expect("at least one split").1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub n_samples: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// One training example: a hidden state and its semantic entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub hidden: Vec<f64>,
    pub se_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainSet {
    pub layer: usize,
    pub examples: Vec<ProbeExample>,
}

impl ProbeTrainSet {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.examples.first() else {
            return Err(Error::Train("empty training set".into()));
        };
        let d = first.hidden.len();
        for (i, e) in self.examples.iter().enumerate() {
            if e.hidden.len() != d {
                return Err(Error::invalid(format!("example {i} has dimension {}", e.hidden.len())));
            }
            if !e.se_value.is_finite() || e.se_value < 0.0 {
                return Err(Error::invalid(format!("example {i} has SE {}", e.se_value)));
            }
            if e.hidden.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("example {i} has a non-finite feature")));
            }
        }
        Ok(())
    }
}

/// Logistic classifier on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Per-dimension training mean, subtracted before the dot product.
    pub feature_mean: Vec<f64>,
    /// Per-dimension training std (1 where the feature is constant).
    pub feature_std: Vec<f64>,
    pub gamma_star: f64,
    pub train_meta: TrainMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.feature_mean.len() != d || self.feature_std.len() != d {
            return Err(Error::Format(format!("probe for layer {} has ragged vectors", self.layer)));
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.feature_mean)
            .chain(&self.feature_std)
            .chain([&self.bias, &self.gamma_star])
            .all(|v| v.is_finite());
        if !finite || self.feature_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Format(format!("probe for layer {} has invalid parameters", self.layer)));
        }
        Ok(())
    }

    fn standardize(&self, hidden: &[f64]) -> Vec<f64> {
        hidden
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Pre-sigmoid output `w . z + b`.
    pub fn logit(&self, hidden: &[f64]) -> Result<f64> {
        if hidden.len() != self.dim() {
            return Err(Error::invalid(format!(
                "hidden state of length {} for a probe of dimension {}",
                hidden.len(),
                self.dim()
            )));
        }
        Ok(dot(&self.weights, &self.standardize(hidden)) + self.bias)
    }

    /// Probability that `hidden` comes from a high-entropy generation.
    pub fn predict(&self, hidden: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(hidden)?))
    }
}

/// `sigmoid(w . z + b)` for the standardized `hidden`.
pub fn sep_predict(probe: &ProbeModel, hidden: &[f64]) -> Result<f64> {
    probe.predict(hidden)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on L2-penalized logistic loss, from zero
/// initialization, against labels `se > gamma*`.
///
/// Zero initialization and full batches make the fit independent of the
/// seed, which is recorded for provenance only.
pub fn train_probe(train: &ProbeTrainSet, opts: TrainOptions) -> Result<ProbeModel> {
    train.validate()?;
    if !(opts.lr > 0.0) || !opts.lr.is_finite() {
        return Err(Error::Train(format!("learning rate must be positive, got {}", opts.lr)));
    }
    let se: Vec<f64> = train.examples.iter().map(|e| e.se_value).collect();
    let gamma_star = two_means_threshold(&se).map_err(|e| Error::Train(e.to_string()))?;
    let labels: Vec<f64> = se.iter().map(|&s| if s > gamma_star { 1.0 } else { 0.0 }).collect();

    let n = train.examples.len();
    let d = train.examples[0].hidden.len();
    let nf = n as f64;
    let mut feature_mean = vec![0.0; d];
    for e in &train.examples {
        for (m, x) in feature_mean.iter_mut().zip(&e.hidden) {
            *m += x / nf;
        }
    }
    let mut feature_std = vec![0.0; d];
    for e in &train.examples {
        for ((s, x), m) in feature_std.iter_mut().zip(&e.hidden).zip(&feature_mean) {
            *s += (x - m) * (x - m) / nf;
        }
    }
    for s in feature_std.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    // quantized so that a stored probe predicts exactly like the in-memory one
    let q = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
    q(&mut feature_mean);
    q(&mut feature_std);

    let z: Vec<Vec<f64>> = train
        .examples
        .iter()
        .map(|e| {
            e.hidden
                .iter()
                .zip(feature_mean.iter().zip(&feature_std))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut grad_w = vec![0.0; d];
    for _ in 0..opts.epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (zi, yi) in z.iter().zip(&labels) {
            let err = sigmoid(dot(&w, zi) + b) - yi;
            for (g, x) in grad_w.iter_mut().zip(zi) {
                *g += err * x;
            }
            grad_b += err;
        }
        for (wj, g) in w.iter_mut().zip(&grad_w) {
            *wj -= opts.lr * (g / nf + L2_PENALTY * *wj);
        }
        b -= opts.lr * grad_b / nf;
    }
    q(&mut w);
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Train("training diverged".into()));
    }
    Ok(ProbeModel {
        layer: train.layer,
        weights: w,
        bias: b,
        feature_mean,
        feature_std,
        gamma_star,
        train_meta: TrainMeta {
            n_samples: n,
            epochs: opts.epochs,
            seed: opts.seed,
        },
    })
}

/// Probes for several layers of the same model, ordered by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    probes: Vec<ProbeModel>,
}

impl ProbeSet {
    pub fn new(mut probes: Vec<ProbeModel>) -> Result<Self> {
        probes.sort_by_key(|p| p.layer);
        let set = Self { probes };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.probes.first() else {
            return Err(Error::Format("probe set is empty".into()));
        };
        for w in self.probes.windows(2) {
            if w[0].layer == w[1].layer {
                return Err(Error::Format(format!("two probes for layer {}", w[0].layer)));
            }
        }
        for p in &self.probes {
            p.validate()?;
            if p.dim() != first.dim() {
                return Err(Error::Format("probes disagree on hidden size".into()));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.probes[0].dim()
    }

    pub fn probes(&self) -> &[ProbeModel] {
        &self.probes
    }

    pub fn layers(&self) -> Vec<usize> {
        self.probes.iter().map(|p| p.layer).collect()
    }

    pub fn get(&self, layer: usize) -> Result<&ProbeModel> {
        self.probes
            .iter()
            .find(|p| p.layer == layer)
            .ok_or_else(|| Error::Config(format!("no probe for layer {layer}")))
    }
}
