//! Redundancy elimination and density weighting over embeddings.
//!
//! Cosine similarity involving an all-zero vector is defined as 0, so zero
//! embeddings are never redundant for RECS and have density 0 for SUD.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, QueryFunction, UncertaintyScore};
use crate::data::Example;
use crate::engine::{Oracle, OracleError};
use crate::model::{AdamState, ModelError, Network};
use crate::rng;

/// Step by which the RECS threshold is relaxed after an unproductive pass.
pub const RECS_THRESHOLD_STEP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error("vectors have lengths {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("pool has {available} candidates, {needed} required")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("id sets differ: {0:?} has no counterpart")]
    IdMismatch(String),
    #[error("unknown example id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, HeuristicError>;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HeuristicError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(cosine_with_norms(a, norm(a), b, norm(b)))
}

/// Size of the redundancy pool for query size `q`: `⌈factor · q⌉`.
pub fn redundancy_pool_size(q: usize, factor: f64) -> usize {
    ((factor * q as f64).ceil() as usize).max(q)
}

/// The most uncertain candidates, in descending uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyPool {
    pub member_ids: Vec<String>,
}

impl RedundancyPool {
    /// Takes the first `⌈factor · q⌉` entries of an already-sorted ranking,
    /// or the whole ranking if it is shorter.
    pub fn from_ranked(ranked: &[UncertaintyScore], q: usize, factor: f64) -> Self {
        let r = redundancy_pool_size(q, factor).min(ranked.len());
        RedundancyPool { member_ids: ranked[..r].iter().map(|s| s.example_id.clone()).collect() }
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityScore {
    pub example_id: String,
    pub density: f64,
}

fn mean_of_top_k(mut sims: Vec<f64>, k: usize) -> f64 {
    sims.sort_unstable_by(|a, b| b.total_cmp(a));
    sims[..k].iter().sum::<f64>() / k as f64
}

/// Mean of the `k` largest cosine similarities between `x` and the other
/// pool members. `x` itself is skipped if it appears in `pool`.
pub fn knn_density(x: &Example, pool: &[&Example], k: usize) -> Result<DensityScore> {
    let others: Vec<&Example> = pool.iter().copied().filter(|e| e.id != x.id).collect();
    if k == 0 || others.len() < k {
        return Err(HeuristicError::PoolTooSmall { needed: k.max(1), available: others.len() });
    }
    let sims = others
        .iter()
        .map(|o| cosine_similarity(&x.embedding, &o.embedding))
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityScore { example_id: x.id.clone(), density: mean_of_top_k(sims, k) })
}

/// [`knn_density`] for every pool member, with norms computed once.
pub fn pool_densities(pool: &[&Example], k: usize) -> Result<Vec<DensityScore>> {
    if k == 0 || pool.len() < k + 1 {
        return Err(HeuristicError::PoolTooSmall { needed: k.max(1), available: pool.len().saturating_sub(1) });
    }
    let dim = pool[0].embedding.len();
    if let Some(bad) = pool.iter().find(|e| e.embedding.len() != dim) {
        return Err(HeuristicError::DimensionMismatch(dim, bad.embedding.len()));
    }
    let norms: Vec<f64> = pool.iter().map(|e| norm(&e.embedding)).collect();
    Ok(pool
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let sims = pool
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, o)| cosine_with_norms(&x.embedding, norms[i], &o.embedding, norms[j]))
                .collect();
            DensityScore { example_id: x.id.clone(), density: mean_of_top_k(sims, k) }
        })
        .collect())
}

/// Uncertainty × density, ranked descending with ascending-id tie-break.
pub fn sud_scores(uncertainties: &[UncertaintyScore], densities: &[DensityScore]) -> Result<Vec<UncertaintyScore>> {
    let by_id: HashMap<&str, f64> = densities.iter().map(|d| (d.example_id.as_str(), d.density)).collect();
    if by_id.len() != uncertainties.len() {
        let known: std::collections::HashSet<&str> = uncertainties.iter().map(|u| u.example_id.as_str()).collect();
        let stray = densities.iter().find(|d| !known.contains(d.example_id.as_str()));
        return Err(HeuristicError::IdMismatch(stray.map_or_else(
            || "duplicate or missing density".to_string(),
            |d| d.example_id.clone(),
        )));
    }
    let mut out = uncertainties
        .iter()
        .map(|u| {
            let d = by_id.get(u.example_id.as_str()).ok_or_else(|| HeuristicError::IdMismatch(u.example_id.clone()))?;
            Ok(UncertaintyScore { value: u.value * d, ..u.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    acquisition::sort_scores(&mut out);
    Ok(out)
}

/// Record of one RECS acceptance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub example_id: String,
    /// Threshold in force when the candidate was accepted.
    pub threshold: f64,
    /// Largest similarity to the previously accepted examples; `None` for the first.
    pub max_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecsSelection {
    pub selected: Vec<String>,
    pub certificates: Vec<Acceptance>,
    /// Number of threshold relaxations performed.
    pub relaxations: usize,
}

/// Redundancy elimination by cosine similarity.
///
/// Scans the pool in uncertainty order and accepts a candidate when its
/// similarity to every accepted example is below the current threshold.
/// When a full pass leaves fewer than `q` accepted, the threshold is relaxed
/// by [`RECS_THRESHOLD_STEP`] and the remaining candidates are rescanned.
/// The configured threshold is never modified.
pub fn recs_select(sorted_rp: &[&Example], q: usize, threshold: f64) -> Result<RecsSelection> {
    if sorted_rp.len() < q {
        return Err(HeuristicError::PoolTooSmall { needed: q, available: sorted_rp.len() });
    }
    let norms: Vec<f64> = sorted_rp.iter().map(|e| norm(&e.embedding)).collect();
    let mut accepted: Vec<usize> = Vec::with_capacity(q);
    let mut taken = vec![false; sorted_rp.len()];
    let mut certificates = Vec::with_capacity(q);
    let mut relaxations = 0;
    while accepted.len() < q {
        let l = threshold + relaxations as f64 * RECS_THRESHOLD_STEP;
        for i in 0..sorted_rp.len() {
            if accepted.len() == q {
                break;
            }
            if taken[i] {
                continue;
            }
            let cand = sorted_rp[i];
            let mut max_sim: Option<f64> = None;
            for &j in &accepted {
                let other = sorted_rp[j];
                if other.embedding.len() != cand.embedding.len() {
                    return Err(HeuristicError::DimensionMismatch(cand.embedding.len(), other.embedding.len()));
                }
                let s = cosine_with_norms(&cand.embedding, norms[i], &other.embedding, norms[j]);
                max_sim = Some(max_sim.map_or(s, |m: f64| m.max(s)));
            }
            if max_sim.is_none_or(|m| m < l) {
                taken[i] = true;
                accepted.push(i);
                certificates.push(Acceptance { example_id: cand.id.clone(), threshold: l, max_similarity: max_sim });
            }
        }
        if accepted.len() < q {
            relaxations += 1;
        }
    }
    Ok(RecsSelection {
        selected: accepted.iter().map(|&i| sorted_rp[i].id.clone()).collect(),
        certificates,
        relaxations,
    })
}

/// Replays RECS certificates: each accepted example must have had similarity
/// below its recorded threshold to every example accepted before it.
pub fn verify_recs_certificates(certificates: &[Acceptance], embeddings: &HashMap<&str, &[f64]>) -> std::result::Result<(), String> {
    for (i, cert) in certificates.iter().enumerate() {
        let x = embeddings.get(cert.example_id.as_str()).ok_or_else(|| format!("unknown id {}", cert.example_id))?;
        for prev in &certificates[..i] {
            let y = embeddings.get(prev.example_id.as_str()).ok_or_else(|| format!("unknown id {}", prev.example_id))?;
            let s = cosine_similarity(x, y).map_err(|e| e.to_string())?;
            if s >= cert.threshold {
                return Err(format!(
                    "{} accepted at threshold {} but has similarity {s} to {}",
                    cert.example_id, cert.threshold, prev.example_id
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetSelection {
    /// Picked ids with the labels the oracle assigned, in pick order.
    pub selected: Vec<(String, usize)>,
    /// Stochastic forward passes spent rescoring the redundancy pool, per iteration.
    pub passes_per_iteration: Vec<u64>,
}

impl RetSelection {
    pub fn rp_passes(&self) -> u64 {
        self.passes_per_iteration.iter().sum()
    }
}

/// Parameters of one redundancy-elimination-by-training selection.
#[derive(Clone, Copy, Debug)]
pub struct RetParams {
    pub q: usize,
    pub passes: usize,
    pub function: QueryFunction,
    pub round: u64,
    /// Seeds random scores and the dropout masks of the single-example steps.
    pub seed: u64,
}

/// Redundancy elimination by training.
///
/// Repeats `q` times: rescore the remaining pool members with fresh
/// stochastic passes, take the most uncertain one, ask the oracle for its
/// label, and take one training step on it. The pool shrinks by one member
/// per iteration.
pub fn ret_select(
    net: &mut Network,
    adam: &mut AdamState,
    rp: &[&Example],
    params: RetParams,
    oracle: &mut dyn Oracle,
) -> Result<RetSelection> {
    let RetParams { q, passes, function, round, seed } = params;
    if rp.len() < q {
        return Err(HeuristicError::PoolTooSmall { needed: q, available: rp.len() });
    }
    let mut remaining: Vec<&Example> = rp.to_vec();
    let mut selected = Vec::with_capacity(q);
    let mut passes_per_iteration = Vec::with_capacity(q);
    for iteration in 0..q as u64 {
        let key = rng::mix(&[round, iteration + 1]);
        let ranked = acquisition::score_pool(net, &remaining, passes, function, key, seed)?;
        passes_per_iteration.push(ranked.forward_passes);
        let top = &ranked.scores[0].example_id;
        let pos = remaining.iter().position(|e| &e.id == top).expect("ranked ids come from the pool");
        let ex = remaining.remove(pos);
        let label = oracle.label(ex)?;
        net.train_one_example(adam, &ex.embedding, label, rng::mix(&[seed, round, iteration, 0x0052_4554]))?;
        selected.push((ex.id.clone(), label));
    }
    Ok(RetSelection { selected, passes_per_iteration })
}
