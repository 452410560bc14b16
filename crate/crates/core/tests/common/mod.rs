//! Independent oracles shared by the integration suites. Each one is
//! written from the definition, without touching the library routine it
//! checks.
#![allow(dead_code)]

use halluscope::DecoderWeights;

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Pearson correlation from the textbook sums.
pub fn pearson_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Base-2 entropy by direct summation.
pub fn entropy2(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Base-2 JSD as the mean KL divergence to the midpoint.
pub fn jsd2(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let kl = |a: &[f64]| -> f64 {
        a.iter().zip(&m).filter(|(x, _)| **x > 0.0).map(|(x, mi)| x * (x / mi).log2()).sum()
    };
    0.5 * kl(p) + 0.5 * kl(q)
}

/// Connected components of an undirected "equivalent" relation via
/// union-find, as canonical sorted groups.
pub fn union_find_groups(n: usize, equivalent: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut c = i;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if equivalent(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    canonical(groups.into_values().collect())
}

pub fn canonical(mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    groups.iter_mut().for_each(|g| g.sort_unstable());
    groups.sort();
    groups
}

/// Threshold minimizing the two-group squared error, by trying every
/// midpoint between consecutive distinct values and recomputing both group
/// means from scratch. Ties go to the lower threshold.
pub fn exhaustive_split(values: &[f64]) -> Option<(f64, f64)> {
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<(f64, f64)> = None;
    for w in distinct.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let (lo, hi): (Vec<f64>, Vec<f64>) = values.iter().partition(|v| **v <= t);
        let sse = |g: &[f64]| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        let cost = sse(&lo) + sse(&hi);
        if best.is_none_or(|(c, _)| cost < c - 1e-9 * c.abs().max(1.0)) {
            best = Some((cost, t));
        }
    }
    best.map(|(c, t)| (t, c))
}

/// Population z-score from the definition.
pub fn zscore_direct(x: f64, s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let m = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    (x - m) / sd
}

pub fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-10).sqrt();
    (0..x.len()).map(|i| (x[i] - mu) / s * g[i] + b[i]).collect()
}

/// Straight-line forward pass written from the layer equations, used as an
/// oracle: returns per position the final hidden state and per layer the
/// (x_attn, x_post) pair.
#[allow(clippy::type_complexity)]
pub fn reference(w: &DecoderWeights, tokens: &[u32]) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    let c = &w.config;
    let d = c.d_model;
    let scale = (c.d_head as f64 / c.n_heads as f64).sqrt();
    // inputs[l][t]: residual entering layer l at position t
    let mut inputs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); c.n_layers + 1];
    for (t, &tok) in tokens.iter().enumerate() {
        inputs[0].push((0..d).map(|i| w.emb.get(tok as usize, i) + w.pos.get(t, i)).collect());
    }
    let mut out = vec![Vec::new(); tokens.len()];
    for l in 0..c.n_layers {
        let lw = &w.layers[l];
        let proj = |m: &halluscope::Matrix, x: &[f64]| -> Vec<f64> {
            (0..m.cols()).map(|j| (0..m.rows()).map(|i| x[i] * m.get(i, j)).sum()).collect()
        };
        for t in 0..tokens.len() {
            let x = inputs[l][t].clone();
            let mut resid = x.clone();
            for h in 0..c.n_heads {
                let g = h / c.kv_group;
                let q = proj(&lw.wq[h], &x);
                let logits: Vec<f64> = (0..=t)
                    .map(|j| {
                        let k = proj(&lw.wk[g], &inputs[l][j]);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / scale
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut head = vec![0.0; c.d_head];
                for j in 0..=t {
                    let v = proj(&lw.wv[g], &inputs[l][j]);
                    for (o, vi) in head.iter_mut().zip(&v) {
                        *o += e[j] / z * vi;
                    }
                }
                let contrib = proj(&lw.wo[h], &head);
                for (r, v) in resid.iter_mut().zip(&contrib) {
                    *r += v;
                }
            }
            let x_attn = ln(&resid, &lw.ln_g[0], &lw.ln_b[0]);
            let hidden: Vec<f64> = (0..c.d_ff)
                .map(|u| ((0..d).map(|i| lw.ffn1.get(u, i) * x_attn[i]).sum::<f64>() + lw.b1[u]).max(0.0))
                .collect();
            let ffn: Vec<f64> = (0..d)
                .map(|i| (0..c.d_ff).map(|u| lw.ffn2.get(i, u) * hidden[u]).sum::<f64>() + lw.b2[i])
                .collect();
            let sum: Vec<f64> = x_attn.iter().zip(&ffn).map(|(a, b)| a + b).collect();
            let x_post = ln(&sum, &lw.ln_g[1], &lw.ln_b[1]);
            inputs[l + 1].push(x_post.clone());
            out[t].push((x_attn, x_post));
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every continuation up to `max_len`, stopping early at `eos`.
pub fn enumerate(vocab: u32, max_len: usize, eos: Option<u32>) -> Vec<Vec<u32>> {
    let mut done = Vec::new();
    let mut open = vec![Vec::new()];
    while let Some(seq) = open.pop() {
        for t in 0..vocab {
            let mut s: Vec<u32> = seq.clone();
            s.push(t);
            if Some(t) == eos || s.len() == max_len {
                done.push(s);
            } else {
                open.push(s);
            }
        }
    }
    done
}
