//! Uncertainty scores over Monte-Carlo dropout samples.
//!
//! All entropies use the natural logarithm with `0 · ln 0 = 0`. Argmax and
//! mode ties resolve to the lowest class index.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::model::{argmax, ModelError, Network};
use crate::rng::{self, Stream};

pub use crate::model::SoftmaxSamples;

/// Tolerance below zero absorbed by the BALD clamp.
pub const BALD_NEGATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("cannot score an empty pool")]
    EmptyPool,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFunction {
    VariationRatio,
    PredictiveEntropy,
    Bald,
    Random,
}

impl QueryFunction {
    pub fn name(self) -> &'static str {
        match self {
            QueryFunction::VariationRatio => "variation_ratio",
            QueryFunction::PredictiveEntropy => "predictive_entropy",
            QueryFunction::Bald => "bald",
            QueryFunction::Random => "random",
        }
    }

    /// Whether scoring needs stochastic forward passes.
    pub fn uses_samples(self) -> bool {
        !matches!(self, QueryFunction::Random)
    }
}

impl std::str::FromStr for QueryFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variation_ratio" | "vr" => Ok(QueryFunction::VariationRatio),
            "predictive_entropy" | "pe" => Ok(QueryFunction::PredictiveEntropy),
            "bald" => Ok(QueryFunction::Bald),
            "random" => Ok(QueryFunction::Random),
            other => Err(format!("unknown query function {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub example_id: String,
    pub value: f64,
    pub function: QueryFunction,
}

/// Shannon entropy of one probability vector, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `1 - f/T` where `f` counts passes whose argmax is the modal class.
pub fn variation_ratio(s: &SoftmaxSamples) -> f64 {
    let mut counts = vec![0usize; s.classes()];
    for row in s.rows() {
        counts[argmax(row)] += 1;
    }
    let mode = counts.iter().copied().max().unwrap_or(0);
    1.0 - mode as f64 / s.passes() as f64
}

/// Per-class mean over passes.
pub fn mean_probabilities(s: &SoftmaxSamples) -> Vec<f64> {
    let mut mean = vec![0.0; s.classes()];
    for row in s.rows() {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
    }
    let t = s.passes() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    mean
}

/// Entropy of the mean softmax.
pub fn predictive_entropy(s: &SoftmaxSamples) -> f64 {
    entropy(&mean_probabilities(s))
}

/// Mean of the per-pass entropies (the expected conditional entropy).
pub fn mean_pass_entropy(s: &SoftmaxSamples) -> f64 {
    s.rows().map(entropy).sum::<f64>() / s.passes() as f64
}

/// Predictive entropy minus mean per-pass entropy.
///
/// # Panics
///
/// If the difference is below `-BALD_NEGATIVE_TOLERANCE`, which Jensen's
/// inequality rules out for valid samples.
pub fn bald(s: &SoftmaxSamples) -> f64 {
    let mi = predictive_entropy(s) - mean_pass_entropy(s);
    assert!(mi >= -BALD_NEGATIVE_TOLERANCE, "BALD came out at {mi}, below fp tolerance");
    mi.max(0.0)
}

/// Score of one example's samples. `Random` has no sample-based score.
pub fn score_samples(s: &SoftmaxSamples, function: QueryFunction) -> Option<f64> {
    match function {
        QueryFunction::VariationRatio => Some(variation_ratio(s)),
        QueryFunction::PredictiveEntropy => Some(predictive_entropy(s)),
        QueryFunction::Bald => Some(bald(s)),
        QueryFunction::Random => None,
    }
}

/// Descending by value; equal values by ascending id.
pub fn sort_scores(scores: &mut [UncertaintyScore]) {
    scores.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.example_id.cmp(&b.example_id)));
}

/// Ranked pool plus the number of stochastic forward passes spent on it.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolScores {
    pub scores: Vec<UncertaintyScore>,
    pub forward_passes: u64,
}

/// Scores every pool member and sorts the result.
///
/// Sample-based functions run `passes` dropout passes per example keyed by
/// `round`; examples are scored in parallel. `Random` draws i.i.d. uniforms
/// from the random-score stream of `random_seed`, in pool order, and costs
/// no forward passes.
pub fn score_pool(
    net: &Network,
    pool: &[&Example],
    passes: usize,
    function: QueryFunction,
    round: u64,
    random_seed: u64,
) -> Result<PoolScores, AcquisitionError> {
    if pool.is_empty() {
        return Err(AcquisitionError::EmptyPool);
    }
    let (mut scores, forward_passes) = if function.uses_samples() {
        let scores = pool
            .par_iter()
            .map(|ex| {
                let s = net.mc_samples(&ex.embedding, &ex.id, passes, round)?;
                let value = score_samples(&s, function).expect("sample-based function");
                Ok(UncertaintyScore { example_id: ex.id.clone(), value, function })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        (scores, (passes * pool.len()) as u64)
    } else {
        let mut rng = rng::stream_rng(random_seed, Stream::RandomScore, &[round]);
        let scores = pool
            .iter()
            .map(|ex| UncertaintyScore { example_id: ex.id.clone(), value: rng.random::<f64>(), function })
            .collect();
        (scores, 0)
    };
    sort_scores(&mut scores);
    Ok(PoolScores { scores, forward_passes })
}
