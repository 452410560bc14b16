//! Residual-stream hallucination scoring for retrieval-augmented decoders.
//!
//! The crate bundles an instrumented toy decoder, a binary trace format,
//! attention/logit-lens scores, semantic entropy with entailment clustering,
//! entropy probes, probe-based scores, and the experiment harness that ties
//! them together.

pub mod decoder;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod probe;
pub mod redeep;
pub mod seredeep;
pub mod store;
pub mod tensor;
pub mod trace;

pub use decoder::{DecoderWeights, GenerateOptions, Hooks, ModelConfig};
pub use entropy::{ClusterSet, EntailmentOracle, SeMode, Verdict};
pub use error::{Error, Result};
pub use probe::{ProbeModel, ProbeSet};
pub use redeep::{Mitigation, RegressionConfig, ScoreBreakdown};
pub use seredeep::{RecordProfile, SeredeepBreakdown};
pub use store::{Container, DatasetRecord, SampledResponse, Split};
pub use tensor::{Matrix, MetricsReport, ProbVec};
pub use trace::{ResidualTrace, Tap};
