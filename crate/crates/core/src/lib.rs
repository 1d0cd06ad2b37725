//! Pool-based active learning driven by Monte-Carlo dropout uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: JSONL ingestion, validation, deterministic pool splitting and a
//!   hashing bag-of-words embedder.
//! - [`model`]: a small dropout MLP trained with Adam, with stochastic forward
//!   passes for uncertainty sampling.
//! - [`acquisition`]: variation ratio, predictive entropy and BALD over
//!   softmax samples, and pool ranking.
//! - [`heuristics`]: redundancy elimination (by training and by cosine
//!   similarity) and uncertainty-density weighting.
//! - [`engine`]: the train / query / annotate / append loop.
//! - [`metrics`]: accuracy, deficiency, Kendall's tau-b, KL divergence and
//!   the similarity-vs-KL ranking experiment.
//! - [`cost`]: forward-pass cost model of redundancy elimination by training.
//! - [`synthetic`]: Gaussian-blob embedding datasets.
//! - [`artifacts`]: run directory formats (`config.json`, `curve.csv`,
//!   `queries.jsonl`).

pub mod acquisition;
pub mod artifacts;
pub mod cost;
pub mod data;
pub mod engine;
pub mod heuristics;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthetic;

pub use acquisition::{QueryFunction, SoftmaxSamples, UncertaintyScore};
pub use data::{Dataset, Example, PoolState, SplitFractions};
pub use engine::{AlConfig, Engine, Heuristic, Oracle, QSpec, RoundRecord, SimulatedOracle};
pub use metrics::LearningCurve;
pub use model::{AdamState, Network};
