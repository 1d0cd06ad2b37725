//! Evaluation metrics: accuracy, deficiency, Kendall's tau-b, KL divergence,
//! and the experiment relating KL change to embedding similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, QueryFunction};
use crate::data::Example;
use crate::heuristics::cosine_similarity;
use crate::model::{AdamState, ForwardMode, ModelError, Network};
use crate::rng;

/// Mass spread over non-target classes when smoothing one-hot targets.
pub const ONE_HOT_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("curves are not aligned: {0}")]
    CurveMismatch(String),
    #[error("reference curve is constant at its maximum; deficiency is undefined")]
    DegenerateReference,
    #[error("id sets differ at {0:?}")]
    IdMismatch(String),
    #[error("labeled counts must be strictly increasing")]
    NotIncreasing,
    #[error("example {0:?} has no gold label")]
    MissingLabel(String),
    #[error("ranking experiment needs at least 3 examples, got {0}")]
    PoolTooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), gold.len()));
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub labeled_count: usize,
    pub accuracy: f64,
}

/// Test accuracy per labeled-set size, one point per round plus the seed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(MetricsError::Empty);
        }
        if points.windows(2).any(|w| w[1].labeled_count <= w[0].labeled_count) {
            return Err(MetricsError::NotIncreasing);
        }
        Ok(LearningCurve { points })
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(labeled_count, accuracy)| CurvePoint { labeled_count, accuracy }).collect())
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_accuracy(&self) -> f64 {
        self.points.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Area between each curve and the reference's overall maximum accuracy,
/// comparison over reference. Below 1 means the comparison beats the
/// reference.
pub fn deficiency(reference: &LearningCurve, comparison: &LearningCurve) -> Result<f64> {
    if reference.len() != comparison.len() {
        return Err(MetricsError::CurveMismatch(format!(
            "reference has {} points, comparison {}",
            reference.len(),
            comparison.len()
        )));
    }
    for (r, c) in reference.points.iter().zip(&comparison.points) {
        if r.labeled_count != c.labeled_count {
            return Err(MetricsError::CurveMismatch(format!(
                "labeled counts {} and {} differ",
                r.labeled_count, c.labeled_count
            )));
        }
    }
    let best = reference.max_accuracy();
    let numerator: f64 = comparison.points.iter().map(|p| best - p.accuracy).sum();
    let denominator: f64 = reference.points.iter().map(|p| best - p.accuracy).sum();
    if denominator == 0.0 {
        return Err(MetricsError::DegenerateReference);
    }
    Ok(numerator / denominator)
}

/// Kendall's tau-b between two paired score vectors, in O(n log n)
/// (Knight's algorithm). Returns 0 when either side is entirely tied.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let tie_pairs = |len: u64| len * (len.saturating_sub(1)) / 2;
    let total = tie_pairs(n as u64);
    let (mut ties_a, mut ties_joint) = (0u64, 0u64);
    let (mut run_a, mut run_joint) = (1u64, 1u64);
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_a += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_joint += 1;
            } else {
                ties_joint += tie_pairs(run_joint);
                run_joint = 1;
            }
        } else {
            ties_a += tie_pairs(run_a);
            ties_joint += tie_pairs(run_joint);
            run_a = 1;
            run_joint = 1;
        }
    }
    ties_a += tie_pairs(run_a);
    ties_joint += tie_pairs(run_joint);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_b = 0u64;
    let mut run_b = 1u64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_b += 1;
        } else {
            ties_b += tie_pairs(run_b);
            run_b = 1;
        }
    }
    ties_b += tie_pairs(run_b);

    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let numer = total as i128 - ties_a as i128 - ties_b as i128 + ties_joint as i128 - 2 * swaps as i128;
    Ok(numer as f64 / denom)
}

/// Sorts ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Tau-b between two id-keyed rankings (higher value = ranked earlier).
pub fn kendall_tau(rank_a: &HashMap<String, f64>, rank_b: &HashMap<String, f64>) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(MetricsError::LengthMismatch(rank_a.len(), rank_b.len()));
    }
    let mut ids: Vec<&String> = rank_a.keys().collect();
    ids.sort();
    let mut a = Vec::with_capacity(ids.len());
    let mut b = Vec::with_capacity(ids.len());
    for id in ids {
        a.push(rank_a[id]);
        b.push(*rank_b.get(id).ok_or_else(|| MetricsError::IdMismatch(id.clone()))?);
    }
    kendall_tau_b(&a, &b)
}

/// `Σ p ln(p/q)` with `0 · ln(0/q) = 0`; infinite if `q` vanishes where `p` does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum())
}

/// One-hot vector with `epsilon` mass spread evenly over the other classes.
pub fn smoothed_one_hot(classes: usize, target: usize, epsilon: f64) -> Vec<f64> {
    if classes == 1 {
        return vec![1.0];
    }
    let mut v = vec![epsilon / (classes - 1) as f64; classes];
    v[target] = 1.0 - epsilon;
    v
}

/// Intermediate values of one ranking experiment, in pool order with the
/// top example removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub top_id: String,
    pub ids: Vec<String>,
    pub kl_before: Vec<f64>,
    pub kl_after: Vec<f64>,
    /// `kl_before - kl_after`; larger means the prediction moved further toward the gold label.
    pub kl_decrease: Vec<f64>,
    pub cosine_to_top: Vec<f64>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RankingParams {
    pub passes: usize,
    pub function: QueryFunction,
    pub round: u64,
    pub seed: u64,
}

/// Trains one step on the most uncertain pool example and correlates, over
/// the rest of the pool, the decrease in KL divergence from the smoothed gold
/// one-hot to the deterministic prediction with cosine similarity to the
/// trained example. The caller's network and optimizer are left untouched.
pub fn ranking_experiment(net: &Network, adam: &AdamState, pool: &[&Example], params: RankingParams) -> Result<RankingReport> {
    if pool.len() < 3 {
        return Err(MetricsError::PoolTooSmall(pool.len()));
    }
    for ex in pool {
        if ex.label.is_none() {
            return Err(MetricsError::MissingLabel(ex.id.clone()));
        }
    }
    let ranked = acquisition::score_pool(net, pool, params.passes, params.function, params.round, params.seed)?;
    let top_id = ranked.scores[0].example_id.clone();
    let top = *pool.iter().find(|e| e.id == top_id).expect("ranked ids come from the pool");
    let rest: Vec<&Example> = pool.iter().copied().filter(|e| e.id != top_id).collect();

    let classes = net.num_classes();
    let kl_to_gold = |model: &Network, ex: &Example| -> Result<f64> {
        let target = smoothed_one_hot(classes, ex.label.unwrap(), ONE_HOT_SMOOTHING);
        let pred: Vec<f64> = model
            .forward(&ex.embedding, ForwardMode::Deterministic)?
            .into_iter()
            .map(|p| p.max(f64::MIN_POSITIVE))
            .collect();
        kl_divergence(&target, &pred)
    };
    let kl_before = rest.iter().map(|e| kl_to_gold(net, e)).collect::<Result<Vec<_>>>()?;

    let mut trained = net.clone();
    let mut opt = adam.clone();
    trained.train_one_example(&mut opt, &top.embedding, top.label.unwrap(), rng::mix(&[params.seed, params.round, 0x4b4c]))?;
    let kl_after = rest.iter().map(|e| kl_to_gold(&trained, e)).collect::<Result<Vec<_>>>()?;

    let kl_decrease: Vec<f64> = kl_before.iter().zip(&kl_after).map(|(b, a)| b - a).collect();
    let cosine_to_top = rest
        .iter()
        .map(|e| cosine_similarity(&e.embedding, &top.embedding).map_err(|err| MetricsError::CurveMismatch(err.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let tau = kendall_tau_b(&kl_decrease, &cosine_to_top)?;
    Ok(RankingReport {
        top_id,
        ids: rest.iter().map(|e| e.id.clone()).collect(),
        kl_before,
        kl_after,
        kl_decrease,
        cosine_to_top,
        tau,
    })
}
