mod common;

use halluscope::probe::{
    sigmoid, train_probe, two_means_threshold, ProbeExample, ProbeSet, ProbeTrainSet, TrainOptions,
};
use halluscope::store::probes_to_container;
use halluscope::tensor::auc;
use halluscope::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn two_means_matches_exhaustive_split(raw in prop::collection::vec(0u16..64, 2..=50)) {
        // eighths keep every group sum exact, so equal-cost splits really tie
        let values: Vec<f64> = raw.iter().map(|v| *v as f64 / 8.0).collect();
        match common::exhaustive_split(&values) {
            None => prop_assert!(matches!(two_means_threshold(&values), Err(Error::DegenerateSample(_)))),
            Some((t, _)) => prop_assert_eq!(two_means_threshold(&values).unwrap(), t),
        }
    }

    #[test]
    fn two_means_ignores_input_order(mut values in prop::collection::vec(-5.0f64..5.0, 2..=30)) {
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let t = two_means_threshold(&values).unwrap();
        values.reverse();
        prop_assert_eq!(two_means_threshold(&values).unwrap(), t);
    }
}

#[test]
fn two_means_examples() {
    assert_eq!(two_means_threshold(&[0.0, 0.1, 0.2, 1.0, 1.1]).unwrap(), 0.6);
    // {0} | {1, 2} and {0, 1} | {2} cost the same; the lower threshold wins
    assert_eq!(two_means_threshold(&[0.0, 1.0, 2.0]).unwrap(), 0.5);
    assert!(two_means_threshold(&[3.0, 3.0]).is_err());
    assert!(two_means_threshold(&[1.0, f64::NAN]).is_err());
}

/// Hidden states whose SE is high exactly when a fixed direction is positive.
fn separable(n: usize, d: usize, seed: u64) -> Vec<ProbeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
    (0..n)
        .map(|_| {
            let hidden: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: f64 = hidden.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let se_value = if s > 0.0 { 1.5 + rng.random_range(0.0..0.5) } else { rng.random_range(0.0..0.5) };
            ProbeExample { hidden, se_value }
        })
        .collect()
}

#[test]
fn separable_probe_generalizes() {
    let train = ProbeTrainSet { layer: 2, examples: separable(300, 8, 1) };
    let probe = train_probe(&train, TrainOptions::default()).unwrap();
    assert!(probe.gamma_star > 0.5 && probe.gamma_star < 1.5, "gamma* = {}", probe.gamma_star);

    let test = separable(200, 8, 2);
    let scores: Vec<f64> = test.iter().map(|e| probe.predict(&e.hidden).unwrap()).collect();
    let labels: Vec<u8> = test.iter().map(|e| (e.se_value > probe.gamma_star) as u8).collect();
    let a = auc(&scores, &labels).unwrap().unwrap();
    assert!(a >= 0.95, "held-out AUC {a}");
    assert!(scores.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn prediction_uses_stored_standardization() {
    let train = ProbeTrainSet { layer: 0, examples: separable(80, 4, 3) };
    let p = train_probe(&train, TrainOptions { epochs: 50, ..Default::default() }).unwrap();
    let h = [0.3, -1.2, 0.7, 2.0];
    let z: f64 = h
        .iter()
        .zip(&p.weights)
        .zip(p.feature_mean.iter().zip(&p.feature_std))
        .map(|((x, w), (m, s))| w * (x - m) / s)
        .sum();
    let want = 1.0 / (1.0 + (-(z + p.bias)).exp());
    assert!((p.predict(&h).unwrap() - want).abs() < 1e-12);
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    assert!(p.predict(&h[..3]).is_err());
}

#[test]
fn training_is_byte_deterministic() {
    let set = ProbeTrainSet { layer: 1, examples: separable(120, 6, 4) };
    let a = train_probe(&set, TrainOptions { seed: 11, ..Default::default() }).unwrap();
    let b = train_probe(&set, TrainOptions { seed: 11, ..Default::default() }).unwrap();
    let bytes = |p| probes_to_container(&ProbeSet::new(vec![p]).unwrap()).unwrap().to_bytes().unwrap();
    assert_eq!(bytes(a.clone()), bytes(b));
    // zero init and full batches leave nothing for the seed to change
    let c = train_probe(&set, TrainOptions { seed: 99, ..Default::default() }).unwrap();
    assert_eq!((a.weights, a.bias), (c.weights, c.bias));
}

#[test]
fn constant_features_and_degenerate_labels() {
    let mut ex = separable(60, 3, 5);
    ex.iter_mut().for_each(|e| e.hidden[1] = 4.0);
    let p = train_probe(&ProbeTrainSet { layer: 0, examples: ex.clone() }, TrainOptions::default()).unwrap();
    assert_eq!(p.feature_std[1], 1.0);
    assert!(p.weights.iter().all(|w| w.is_finite()));

    ex.iter_mut().for_each(|e| e.se_value = 0.7);
    assert!(matches!(
        train_probe(&ProbeTrainSet { layer: 0, examples: ex }, TrainOptions::default()),
        Err(Error::Train(_))
    ));
    assert!(train_probe(&ProbeTrainSet { layer: 0, examples: vec![] }, TrainOptions::default()).is_err());
}

#[test]
fn probe_sets_are_keyed_by_layer() {
    let p = |l| {
        train_probe(&ProbeTrainSet { layer: l, examples: separable(40, 3, l as u64) }, TrainOptions { epochs: 5, ..Default::default() })
            .unwrap()
    };
    let set = ProbeSet::new(vec![p(4), p(2)]).unwrap();
    assert_eq!(set.layers(), vec![2, 4]);
    assert_eq!(set.get(4).unwrap().layer, 4);
    assert!(set.get(3).is_err());
    assert!(ProbeSet::new(vec![p(1), p(1)]).is_err());
}

#[test]
fn two_means_separates_obvious_groups() {
    assert_eq!(two_means_threshold(&[1.0, 2.0, 8.0, 9.0]).unwrap(), 5.0);
    assert_eq!(common::exhaustive_split(&[1.0, 2.0, 8.0, 9.0]).unwrap().0, 5.0);
}

#[test]
fn separable_blobs_are_fit_on_the_training_set() {
    let ex = separable(200, 8, 9);
    let p = train_probe(&ProbeTrainSet { layer: 0, examples: ex.clone() }, TrainOptions::default()).unwrap();
    let correct = ex
        .iter()
        .filter(|e| (p.predict(&e.hidden).unwrap() > 0.5) == (e.se_value > p.gamma_star))
        .count();
    assert!(correct as f64 / 200.0 >= 0.95, "training accuracy {correct}/200");
}
