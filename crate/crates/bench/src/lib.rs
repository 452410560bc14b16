//! Shared fixtures for the benchmarks.

use halluscope::harness::{default_oracle, generate_corpus, train_probes, Corpus, PipelineOptions, SynthSpec};
use halluscope::{ProbeSet, RegressionConfig};

/// A 20-record planted corpus at the default model size.
pub fn small_corpus() -> Corpus {
    let mut spec = SynthSpec::default_planted(7);
    spec.n_records = 20;
    generate_corpus(&spec).expect("valid spec")
}

/// Probes for every layer from the scoring floor up, trained on `c`.
pub fn probes_for(c: &Corpus) -> ProbeSet {
    let floor = c.traces[0].meta.min_score_layer;
    let layers: Vec<usize> = (floor..c.model.config.n_layers).collect();
    let opts = PipelineOptions { epochs: 100, ..Default::default() };
    train_probes(&c.records, &c.traces, &layers, &opts, &mut default_oracle()).expect("trainable corpus")
}

/// Two FFN layers and one head just above the scoring floor.
pub fn config_for(c: &Corpus) -> RegressionConfig {
    let f = c.traces[0].meta.min_score_layer;
    RegressionConfig::new(1.0, 0.2, vec![f, f + 1], vec![(f + 1, 0)])
}
