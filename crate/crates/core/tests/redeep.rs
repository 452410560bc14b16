mod common;

use approx::assert_abs_diff_eq;
use halluscope::decoder::{generate, random_model, trace_sequence, forward_sequence, GenerateOptions, Hooks, ModelConfig};
use halluscope::redeep::{
    chunk_ecs_from_embeddings, chunk_mean, chunk_pks, ecs, fixed_chunks, generate_mitigated, mitigate_step, pks,
    rank_by_correlation, redeep_score, select_heads_layers,
};
use halluscope::{DecoderWeights, Mitigation, RegressionConfig, ResidualTrace, Tap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> (DecoderWeights, ResidualTrace) {
    let mut cfg = ModelConfig::toy(12, 4, 16, 10);
    cfg.max_positions = 32;
    let w = random_model(&cfg, 31).unwrap();
    let t = trace_sequence(&w, &[1, 4, 2, 8, 5, 7], &[3, 9, 0, 6], &Hooks::none()).unwrap();
    (w, t)
}

/// Logit-lens distribution by explicit matvec and softmax.
fn lens(w: &DecoderWeights, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..w.config.vocab_size)
        .map(|v| (0..x.len()).map(|i| w.unemb.get(v, i) * x[i]).sum::<f64>() + w.unemb_bias[v])
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn pks_matches_composed_lens_and_jsd() {
    let (w, t) = toy();
    for n in 0..t.response_len() {
        let pos = t.response_position(n);
        let before = lens(&w, t.hidden(Tap::Attn, pos, 10));
        let after = lens(&w, t.hidden(Tap::Post, pos, 10));
        assert_abs_diff_eq!(pks(&t, &w, n, 10).unwrap(), common::jsd2(&before, &after), epsilon = 1e-9);
    }
}

#[test]
fn ecs_pools_the_top_attended_states() {
    let (_, t) = toy();
    for n in 0..t.response_len() {
        let row = t.attn_row(n, 10, 2);
        // exhaustive: top two of six by weight, lower index on ties
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let pooled: Vec<f64> = (0..t.meta.d_model)
            .map(|i| order[..2].iter().map(|&j| t.hidden(Tap::Post, j, 10)[i]).sum::<f64>() / 2.0)
            .collect();
        let own = t.hidden(Tap::Post, t.response_position(n), 10);
        assert_abs_diff_eq!(ecs(&t, n, 10, 2, 30.0).unwrap(), cos(&pooled, own), epsilon = 1e-9);
    }
}

#[test]
fn redeep_score_term_by_term() {
    let (w, t) = toy();
    let mut cfg = RegressionConfig::new(1.0, 0.2, vec![9, 10], vec![(8, 1), (11, 3)]);
    cfg.k_percent = 50.0;
    let b = redeep_score(&t, &w, &cfg).unwrap();
    let mut tokens = Vec::new();
    for n in 0..4 {
        let pos = t.response_position(n);
        let p: f64 = [9, 10]
            .iter()
            .map(|&l| common::jsd2(&lens(&w, t.hidden(Tap::Attn, pos, l)), &lens(&w, t.hidden(Tap::Post, pos, l))))
            .sum();
        let c: f64 = [(8, 1), (11, 3)].iter().map(|&(l, h)| ecs(&t, n, l, h, 50.0).unwrap()).sum();
        tokens.push(p - 0.2 * c);
    }
    for (got, want) in b.tokens.iter().zip(&tokens) {
        assert_abs_diff_eq!(got, want, epsilon = 1e-9);
    }
    assert_abs_diff_eq!(b.score, tokens.iter().sum::<f64>() / 4.0, epsilon = 1e-9);

    cfg.copy_heads = vec![(2, 0)];
    assert!(redeep_score(&t, &w, &cfg).is_err(), "layer below the scoring floor");
}

#[test]
fn chunk_scores_are_nested_means() {
    assert_eq!(fixed_chunks(7, 3), vec![(0, 3), (3, 6), (6, 7)]);
    assert!(fixed_chunks(4, 0).is_empty());
    let s = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 7.0];
    // 3 chunks: means 2, 20, 7
    assert_abs_diff_eq!(chunk_mean(&s, &fixed_chunks(7, 3)).unwrap(), 29.0 / 3.0, epsilon = 1e-12);
    // uneven chunks: means 1.5, 15.75
    assert_abs_diff_eq!(chunk_mean(&s[..6], &[(0, 2), (2, 6)]).unwrap(), (1.5 + 15.75) / 2.0, epsilon = 1e-12);
    assert!(chunk_mean(&s, &[(2, 2)]).is_err());

    let pairs = vec![(vec![1.0, 0.0], vec![1.0, 0.0]), (vec![1.0, 0.0], vec![0.0, 1.0]), (vec![1.0, 1.0], vec![1.0, 0.0])];
    assert_abs_diff_eq!(chunk_ecs_from_embeddings(&pairs).unwrap(), (1.0 + 0.5f64.sqrt()) / 3.0, epsilon = 1e-12);

    let (w, t) = toy();
    let tok: Vec<f64> = (0..4).map(|n| pks(&t, &w, n, 10).unwrap()).collect();
    let want = ((tok[0] + tok[1] + tok[2]) / 3.0 + tok[3]) / 2.0;
    assert_abs_diff_eq!(chunk_pks(&t, &w, 3, 10).unwrap(), want, epsilon = 1e-12);
}

#[test]
fn planted_correlated_candidate_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<f64> = (0..60).map(|i| (i % 2) as f64).collect();
    let mut layers: Vec<(usize, Vec<f64>)> =
        (0..8).map(|l| (l, (0..60).map(|_| rng.random_range(0.0..1.0)).collect())).collect();
    layers[5].1 = labels.iter().map(|y| 3.0 * y - 1.0).collect();
    layers[2].1 = vec![0.4; 60];
    let ranked = rank_by_correlation(&layers, &labels, 3).unwrap();
    assert_eq!(ranked[0].key, 5);
    assert_abs_diff_eq!(ranked[0].corr, 1.0, epsilon = 1e-12);
    assert!(ranked.iter().all(|r| r.key != 2), "constant candidates are skipped");

    let heads = vec![((4, 1), labels.iter().map(|y| -y).collect::<Vec<f64>>()), ((4, 0), labels.clone())];
    let sel = select_heads_layers(&heads, &layers, &labels, 1, 2).unwrap();
    // equal |corr|: the smaller key wins
    assert_eq!(sel.copy_heads[0].key, (4, 0));
    assert_eq!(sel.ffn_layers.len(), 2);
}

#[test]
fn mitigation_scales_contributions_exactly() {
    let (w, _) = toy();
    let tokens = [2, 5, 1];
    let plain = forward_sequence(&w, &tokens, &Hooks::none()).unwrap();
    let mut heads = Hooks::none();
    heads.head_scale.insert((0, 1), 2.0);
    let scaled = forward_sequence(&w, &tokens, &heads).unwrap();
    let mut ffn = Hooks::none();
    ffn.ffn_scale.insert(0, 0.5);
    let damped = forward_sequence(&w, &tokens, &ffn).unwrap();
    for t in 0..tokens.len() {
        for (a, b) in scaled[t].head_out[0][1].iter().zip(&plain[t].head_out[0][1]) {
            assert_eq!(*a, 2.0 * b);
        }
        assert_eq!(scaled[t].head_out[0][0], plain[t].head_out[0][0]);
        for (a, b) in damped[t].ffn_out[0].iter().zip(&plain[t].ffn_out[0]) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    let m = Mitigation { mu: 2.0, nu: 0.5, tau: 0.1 };
    let mut hc = vec![vec![1.0, -2.0]];
    let mut fc = vec![4.0];
    assert!(!mitigate_step(&mut hc, Some(&mut fc), 0.1, &m).unwrap());
    assert_eq!((hc[0].clone(), fc.clone()), (vec![1.0, -2.0], vec![4.0]));
    assert!(mitigate_step(&mut hc, Some(&mut fc), 0.2, &m).unwrap());
    assert_eq!((hc[0].clone(), fc), (vec![2.0, -4.0], vec![2.0]));
    assert!(mitigate_step(&mut hc, None, 1.0, &Mitigation { mu: 0.5, ..m }).is_err());
}

#[test]
fn mitigated_generation_switches_on_the_threshold() {
    let (w, _) = toy();
    let mut cfg = RegressionConfig::new(1.0, 0.2, vec![10], vec![(10, 0)]);
    cfg.mitigation = Some(Mitigation { mu: 3.0, nu: 0.2, tau: 1e9 });
    let prompt = [1, 2, 3];
    let off = generate_mitigated(&w, &prompt, 4, &cfg, |_| Ok(0.0)).unwrap();
    let greedy = generate(&w, &prompt, &GenerateOptions::greedy(4), &Hooks::none()).unwrap();
    assert_eq!(off.tokens, greedy.tokens);
    assert!(off.mitigated.iter().all(|m| !m));

    cfg.mitigation = Some(Mitigation { mu: 3.0, nu: 0.2, tau: -1.0 });
    let mut seen = Vec::new();
    let on = generate_mitigated(&w, &prompt, 4, &cfg, |t| {
        seen.push(t.response_len());
        Ok(0.0)
    })
    .unwrap();
    assert!(on.mitigated.iter().all(|m| *m));
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert!(generate_mitigated(&w, &prompt, 0, &cfg, |_| Ok(0.0)).is_err());
}
