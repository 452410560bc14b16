//! Numeric primitives shared by the scoring modules.
//!
//! Everything here is pure. Entropies and divergences are in bits (base-2
//! logarithms) so that Jensen-Shannon divergence lands in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating that a distribution sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Row vector times matrix: `x · self` for `x` of length `rows`.
    pub fn vecmat(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`
#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite entry at {i}")));
    }
    Ok(())
}

/// A validated probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        check_finite(&probs, "distribution")?;
        if let Some(p) = probs.iter().find(|p| **p < 0.0) {
            return Err(Error::invalid(format!("negative probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative masses into a distribution.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        check_finite(masses, "masses")?;
        if masses.iter().any(|m| *m < 0.0) {
            return Err(Error::invalid("negative mass"));
        }
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateSample("all-zero mass".into()));
        }
        Ok(Self(masses.iter().map(|m| m / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("empty distribution"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for ProbVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVec::new(v)
    }
}

impl From<ProbVec> for Vec<f64> {
    fn from(p: ProbVec) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty input"));
    }
    check_finite(logits, "logits")?;
    Ok(ProbVec(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Natural-log log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn shannon_entropy(p: &ProbVec, base: f64) -> Result<f64> {
    if !(base > 1.0) || !base.is_finite() {
        return Err(Error::invalid(format!("entropy base must be > 1, got {base}")));
    }
    let h: f64 = p
        .as_slice()
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum();
    Ok((h / base.ln()).max(0.0))
}

/// Entropy in bits.
pub fn entropy_bits(p: &ProbVec) -> f64 {
    shannon_entropy(p, 2.0).expect("base 2 is valid")
}

fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).log2())
        .sum()
}

/// Jensen-Shannon divergence in bits; symmetric and bounded by `[0, 1]`.
pub fn jsd(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "jsd length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let v = 0.5 * kl_bits(p.as_slice(), &m) + 0.5 * kl_bits(q.as_slice(), &m);
    Ok(v.clamp(0.0, 1.0))
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("mean of empty sample"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Population standard deviation (divide by N).
pub fn popstd(xs: &[f64]) -> Result<f64> {
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    Ok(var.sqrt())
}

/// Z-score of `x` against `sample` using the population standard deviation.
pub fn zscore(x: f64, sample: &[f64]) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::invalid(format!(
            "z-score needs at least 2 samples, got {}",
            sample.len()
        )));
    }
    check_finite(sample, "z-score sample")?;
    let m = mean(sample)?;
    let s = popstd(sample)?;
    if s == 0.0 {
        return Err(Error::DegenerateSample("zero standard deviation".into()));
    }
    Ok((x - m) / s)
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "pearson length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 points"));
    }
    check_finite(xs, "pearson xs")?;
    check_finite(ys, "pearson ys")?;
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSample("constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Accuracy, AUC, F1 and recall for a binary detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub n: usize,
}

/// Rank-statistic (Mann-Whitney) AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auc length mismatch: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_finite(scores, "auc scores")?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| r)
        .sum();
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(Some(u / (np * n_neg as f64)))
}

/// Threshold-based metrics plus AUC. A score `>= threshold` predicts label 1.
pub fn binary_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} not in {{0,1}}")));
    }
    let auc = auc(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = scores.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        acc: ratio(tp + tn, n),
        auc,
        f1,
        recall,
        precision,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 1.0 / 3.0, epsilon = 1e-15);
        // e^-1000 underflows to exactly 0 in f64; the oracle value is ~5e-435
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(
            shannon_entropy(&ProbVec::uniform(4).unwrap(), 2.0).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_eq!(shannon_entropy(&pv(&[1.0, 0.0, 0.0]), 2.0).unwrap(), 0.0);
        // direct summation: 0.5*1 + 0.25*2 + 0.25*2
        assert_abs_diff_eq!(
            shannon_entropy(&pv(&[0.5, 0.25, 0.25]), 2.0).unwrap(),
            1.5,
            epsilon = 1e-12
        );
        assert!(shannon_entropy(&pv(&[1.0]), 1.0).is_err());
        assert!(ProbVec::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = pv(&[0.3, 0.7]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(jsd(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 1.0, epsilon = 1e-12);
        // oracle: m = [0.75, 0.25]; 0.5*KL(p||m) + 0.5*KL(q||m)
        let m = [0.75f64, 0.25];
        let kl_p = 0.5 * (0.5 / m[0]).log2() + 0.5 * (0.5 / m[1]).log2();
        let kl_q = (1.0 / m[0]).log2();
        let oracle = 0.5 * kl_p + 0.5 * kl_q;
        let v = jsd(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.3113, epsilon = 1e-4);
        assert!(jsd(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, -3.0], &[-1.0, 3.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector)));
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore(2.0, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // popstd({1,2,3}) = sqrt(2/3); (3-2)/sqrt(2/3) = sqrt(1.5)
        assert_abs_diff_eq!(zscore(3.0, &[1.0, 2.0, 3.0]).unwrap(), 1.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(zscore(3.0, &[1.0, 2.0, 3.0]).unwrap(), 1.2247, epsilon = 1e-4);
        assert!(matches!(zscore(1.0, &[5.0, 5.0, 5.0]), Err(Error::DegenerateSample(_))));
        assert!(zscore(1.0, &[5.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(pearson(&xs, &xs).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&xs, &[-1.0, -2.0, -3.0]).unwrap(), -1.0, epsilon = 1e-12);
        // oracle: dx = (-1,0,1), dy = (-7/3,-1/3,8/3); sxy = 5, sxx = 2, syy = 38/3
        let oracle = 5.0 / (2.0f64.sqrt() * (38.0f64 / 3.0).sqrt());
        let r = pearson(&xs, &[2.0, 4.0, 7.0]).unwrap();
        assert_abs_diff_eq!(r, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.99340, epsilon = 1e-5);
        assert!(matches!(pearson(&xs, &[1.0, 1.0, 1.0]), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn metrics_examples() {
        let m = binary_metrics(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!((m.acc, m.auc, m.f1, m.recall), (1.0, Some(1.0), 1.0, 1.0));

        let m = binary_metrics(&[0.3; 4], &[0, 1, 0, 1], 0.5).unwrap();
        assert_eq!(m.auc, Some(0.5));

        let m = binary_metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!(m.auc, Some(0.75));
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.acc, 0.75);

        let m = binary_metrics(&[0.1, 0.9], &[1, 1], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.vecmat(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
