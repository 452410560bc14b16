mod common;

use approx::assert_abs_diff_eq;
use halluscope::decoder::{logit_lens, DecoderWeights, ModelConfig};
use halluscope::probe::{ProbeModel, ProbeSet, TrainMeta};
use halluscope::redeep::{attended_count, attended_tokens, ecs, pks, redeep_score};
use halluscope::seredeep::{
    attended_entropies, ece, layer_correlation, pke, seredeep_score, token_entropy, CorrelationMode,
};
use halluscope::tensor::Matrix;
use halluscope::trace::TraceMeta;
use halluscope::{RecordProfile, RegressionConfig, ResidualTrace, Tap};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One layer, one head, d = 2, three context tokens and two response
/// tokens. The probe reads sigmoid(h[0]), so probe outputs are set directly
/// through the first coordinate; the second coordinate only moves cosines.
fn trace() -> ResidualTrace {
    let (c, n, d) = (3, 2, 2);
    let post = [
        [logit(0.5), 1.0],
        [logit(0.7), 2.0],
        [logit(0.1), -1.0],
        [logit(0.9), 0.5],
        [logit(0.4), 0.0],
    ];
    let attn_tap = [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [logit(0.6), 0.5], [logit(0.4), 3.0]];
    let flat = |rows: &[[f64; 2]]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    ResidualTrace {
        meta: TraceMeta {
            n_layers: 1,
            n_heads: 1,
            d_model: d,
            context_len: c,
            response_len: n,
            min_score_layer: 0,
            context_ids: vec![0, 1, 2],
            response_ids: vec![1, 0],
            model: None,
        },
        x_pre: vec![0.0; (c + n) * d],
        x_attn: flat(&attn_tap),
        x_post: flat(&post),
        attn: vec![0.5, 0.4, 0.1, 0.1, 0.4, 0.5],
        token_logprob: vec![-0.1, -0.2],
    }
}

fn probes() -> ProbeSet {
    ProbeSet::new(vec![ProbeModel {
        layer: 0,
        weights: vec![1.0, 0.0],
        bias: 0.0,
        feature_mean: vec![0.0, 0.0],
        feature_std: vec![1.0, 1.0],
        gamma_star: 0.5,
        train_meta: TrainMeta { n_samples: 0, epochs: 0, seed: 0 },
    }])
    .unwrap()
}

fn config() -> RegressionConfig {
    let mut cfg = RegressionConfig::new(1.0, 0.2, vec![0], vec![(0, 0)]);
    cfg.k_percent = 50.0;
    cfg
}

#[test]
fn attended_set_size_and_ties() {
    assert_eq!(attended_count(30, 10.0), 3);
    assert_eq!(attended_count(31, 10.0), 4);
    assert_eq!(attended_count(5, 10.0), 1);
    assert_eq!(attended_count(3, 50.0), 2);
    assert_eq!(attended_count(7, 100.0), 7);
    assert_eq!(attended_tokens(&[0.2, 0.3, 0.3, 0.2], 50.0).unwrap(), vec![1, 2]);
    assert_eq!(attended_tokens(&[0.25; 4], 50.0).unwrap(), vec![0, 1]);
    assert_eq!(attended_tokens(&[0.1, 0.2, 0.7], 10.0).unwrap(), vec![2]);
    assert!(attended_tokens(&[], 10.0).is_err());
    assert!(attended_tokens(&[1.0], 0.0).is_err());
}

#[test]
fn ece_is_a_zscore_against_attended_outputs() {
    let (t, p) = (trace(), probes());
    assert_abs_diff_eq!(token_entropy(&t, &p, 0, 0).unwrap(), 0.9, epsilon = 1e-12);
    let set = attended_entropies(&t, &p, 0, 0, 0, 50.0).unwrap();
    assert_abs_diff_eq!(set[0], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(set[1], 0.7, epsilon = 1e-12);
    // mean 0.6, population std 0.1
    assert_abs_diff_eq!(ece(&t, &p, 0, 0, 0, 50.0).unwrap(), 3.0, epsilon = 1e-9);
    assert_abs_diff_eq!(
        ece(&t, &p, 0, 0, 0, 50.0).unwrap(),
        common::zscore_direct(0.9, &[0.5, 0.7]),
        epsilon = 1e-9
    );
    // second token attends {1, 2}: outputs 0.7, 0.1 around its own 0.4
    assert_abs_diff_eq!(ece(&t, &p, 1, 0, 0, 50.0).unwrap(), 0.0, epsilon = 1e-9);
    // a single attended token has no spread
    assert_eq!(ece(&t, &p, 0, 0, 0, 10.0).unwrap(), 0.0);
}

#[test]
fn pke_is_the_probe_change_across_the_ffn() {
    let (t, p) = (trace(), probes());
    assert_abs_diff_eq!(pke(&t, &p, 0, 0).unwrap(), 0.3, epsilon = 1e-12);
    assert_abs_diff_eq!(pke(&t, &p, 1, 0).unwrap(), 0.0, epsilon = 1e-12);
    assert!(pke(&t, &p, 2, 0).is_err());
}

#[test]
fn seredeep_score_combines_terms() {
    let b = seredeep_score(&trace(), &probes(), &config()).unwrap();
    // token 0: 0.3 - 0.2 * 3.0; token 1: 0 - 0
    assert_abs_diff_eq!(b.terms.tokens[0], -0.3, epsilon = 1e-9);
    assert_abs_diff_eq!(b.terms.tokens[1], 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(b.score(), -0.15, epsilon = 1e-9);
    assert_abs_diff_eq!(b.pke[0].1, 0.15, epsilon = 1e-9);
    assert_abs_diff_eq!(b.ece[0].1, 1.5, epsilon = 1e-9);
    assert_eq!(b.degenerate_ece, 0);

    let mut narrow = config();
    narrow.k_percent = 10.0;
    let b = seredeep_score(&trace(), &probes(), &narrow).unwrap();
    assert_eq!(b.degenerate_ece, 2);
    assert_abs_diff_eq!(b.score(), 0.15, epsilon = 1e-9);

    let mut bad = config();
    bad.ffn_layers = vec![1];
    assert!(seredeep_score(&trace(), &probes(), &bad).is_err());
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

fn lens_model() -> DecoderWeights {
    let mut cfg = ModelConfig::toy(1, 1, 2, 3);
    cfg.max_positions = 8;
    let mut w = DecoderWeights::zeros(cfg).unwrap();
    w.unemb = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
    w.unemb_bias = vec![0.0, 0.5, 0.0];
    w
}

#[test]
fn redeep_components_follow_their_definitions() {
    let (t, w) = (trace(), lens_model());
    // token 0 attends {0, 1}; pooled state is their mean
    let pooled = [0.5 * (logit(0.5) + logit(0.7)), 1.5];
    let own = t.hidden(Tap::Post, 3, 0);
    assert_abs_diff_eq!(ecs(&t, 0, 0, 0, 50.0).unwrap(), cos(&pooled, own), epsilon = 1e-12);

    let dist = |x: &[f64]| {
        let z: Vec<f64> = [x[0], x[1] + 0.5, -x[0] - x[1]].iter().map(|v| v.exp()).collect();
        let s: f64 = z.iter().sum();
        z.iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let before = dist(t.hidden(Tap::Attn, 3, 0));
    let after = dist(t.hidden(Tap::Post, 3, 0));
    assert_abs_diff_eq!(pks(&t, &w, 0, 0).unwrap(), common::jsd2(&before, &after), epsilon = 1e-12);
    let lens = logit_lens(&[0.0, 0.0], &w).unwrap();
    assert_abs_diff_eq!(lens.as_slice()[1], 0.5f64.exp() / (2.0 + 0.5f64.exp()), epsilon = 1e-12);

    let cfg = config();
    let b = redeep_score(&t, &w, &cfg).unwrap();
    for n in 0..2 {
        let want = pks(&t, &w, n, 0).unwrap() - 0.2 * ecs(&t, n, 0, 0, 50.0).unwrap();
        assert_abs_diff_eq!(b.tokens[n], want, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(b.score, 0.5 * (b.tokens[0] + b.tokens[1]), epsilon = 1e-12);
}

#[test]
fn regression_arithmetic() {
    // one token with PKE 0.5 and ECE 1.0: 1 * 0.5 - 0.2 * 1.0
    let mut t = trace().truncate_response(1).unwrap();
    t.x_post[3 * 2] = logit(0.7);
    t.x_attn[3 * 2] = logit(0.2);
    let b = seredeep_score(&t, &probes(), &config()).unwrap();
    assert_abs_diff_eq!(b.pke[0].1, 0.5, epsilon = 1e-9);
    assert_abs_diff_eq!(b.ece[0].1, 1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(b.score(), 0.3, epsilon = 1e-9);
}

fn profile(pke: f64, ece: f64) -> RecordProfile {
    RecordProfile {
        layers: vec![4, 5],
        n_heads: 2,
        pke: vec![pke, 0.1 * pke],
        pks: None,
        ece: vec![vec![ece, 0.0], vec![ece, -ece]],
        ecs: vec![vec![0.0; 2]; 2],
        degenerate_ece: 0,
    }
}

#[test]
fn layer_correlation_follows_planted_signal() {
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
    let planted: Vec<RecordProfile> = labels.iter().map(|y| profile(0.2 + y, -y)).collect();
    let pke = layer_correlation(&planted, &labels, CorrelationMode::Pke).unwrap();
    assert_abs_diff_eq!(pke[0].corr.unwrap(), 1.0, epsilon = 1e-12);
    let ece_rows = layer_correlation(&planted, &labels, CorrelationMode::Ece).unwrap();
    // per head then head mean, per layer; -ECE is reported
    assert_eq!(ece_rows.len(), 6);
    assert_abs_diff_eq!(ece_rows[0].corr.unwrap(), 1.0, epsilon = 1e-12);
    assert_eq!(ece_rows[1].corr, None);

    let noisy: Vec<RecordProfile> = (0..200).map(|_| profile(rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    for row in layer_correlation(&noisy, &shuffled, CorrelationMode::Pke).unwrap() {
        assert!(row.corr.unwrap().abs() < 0.3);
    }
    assert!(layer_correlation(&noisy[..1], &labels[..1], CorrelationMode::Pke).is_err());
}
