//! Forward-pass cost of redundancy elimination by training.
//!
//! Two kinds of passes are counted: *basic* passes that score the whole
//! unlabeled pool once per round, and *RP passes* that rescore the shrinking
//! redundancy pool before each single-example training step. The closed
//! forms below treat the per-round RP cost as an arithmetic progression of
//! `q + 1` terms starting at `|RP| = f·q`; the engine actually rescores `q`
//! times (pool sizes `r, r-1, …, r-q+1`), so the exact count differs from
//! the closed form by the extra `T·(f·q - q)` term. Both are exposed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heuristics::redundancy_pool_size;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid cost parameters: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Stochastic passes per scoring.
    pub passes: u64,
    pub data_size: u64,
    pub samples_to_label: u64,
    pub q: u64,
    /// Redundancy pool factor, `|RP| = ⌈f·q⌉`.
    pub factor: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.q == 0 {
            return Err(CostError::InvalidSpec("q must be at least 1".into()));
        }
        if self.passes == 0 {
            return Err(CostError::InvalidSpec("T must be at least 1".into()));
        }
        if self.factor.is_nan() || self.factor <= 1.0 || self.factor.is_infinite() {
            return Err(CostError::InvalidSpec(format!("redundancy factor must exceed 1, got {}", self.factor)));
        }
        if self.samples_to_label > self.data_size {
            return Err(CostError::InvalidSpec("cannot label more samples than the data holds".into()));
        }
        Ok(())
    }

    /// `f' = 2f - 1`.
    pub fn factor_prime(&self) -> f64 {
        2.0 * self.factor - 1.0
    }

    pub fn rounds(&self) -> u64 {
        self.samples_to_label.div_ceil(self.q)
    }
}

/// Closed form `T · ½ · f' · (q² + q)`; equals `T·(q² + q)` at `f = 1.5`.
pub fn rp_passes_per_round(params: &CostParams) -> f64 {
    let q = params.q as f64;
    params.passes as f64 * 0.5 * params.factor_prime() * (q * q + q)
}

/// Exact count `Σ_{i=0}^{q-1} T·(r - i)` for a pool of `r` and `q` picks.
pub fn rp_passes_exact(passes: u64, r: u64, q: u64) -> u64 {
    debug_assert!(r >= q);
    passes * (q * r - q * q.saturating_sub(1) / 2)
}

/// Expected `closed − exact` per round when `f·q` is integral: the closed
/// form's extra progression term `T·(f·q − q)`.
pub fn documented_gap(params: &CostParams) -> f64 {
    params.passes as f64 * (params.factor - 1.0) * params.q as f64
}

/// `T · ⌈S/q⌉ · (|data| + ½ f' (q² + q))`; at `f = 1.5` this is
/// `T · ⌈S/q⌉ · (|data| + q² + q)`.
pub fn total_passes(params: &CostParams) -> f64 {
    params.rounds() as f64 * (params.passes as f64 * params.data_size as f64 + rp_passes_per_round(params))
}

/// `T · S · (|data|/q + q + 1)`, the smooth approximation whose minimum sits
/// at `q = √|data|`.
pub fn total_passes_approx(params: &CostParams) -> f64 {
    let q = params.q as f64;
    params.passes as f64 * params.samples_to_label as f64 * (params.data_size as f64 / q + q + 1.0)
}

/// Per-round prediction of what an instrumented run counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub unlabeled_before: u64,
    pub queried: u64,
    pub basic: u64,
    pub rp: u64,
}

/// Simulates the rounds with the true shrinking pool: round `k` scores all
/// of `U_k`, then rescores a pool of `min(⌈f·q⌉, |U_k|)` for
/// `min(q, |U_k|)` picks. The pool starts at `data_size`.
pub fn exact_schedule(params: &CostParams) -> Vec<RoundCost> {
    let r_full = redundancy_pool_size(params.q as usize, params.factor) as u64;
    let mut unlabeled = params.data_size;
    let mut labeled = 0;
    let mut out = Vec::new();
    while labeled < params.samples_to_label && unlabeled > 0 {
        let q = params.q.min(unlabeled);
        let r = r_full.min(unlabeled);
        out.push(RoundCost {
            unlabeled_before: unlabeled,
            queried: q,
            basic: params.passes * unlabeled,
            rp: rp_passes_exact(params.passes, r, q),
        });
        unlabeled -= q;
        labeled += q;
    }
    out
}

pub fn total_passes_exact(params: &CostParams) -> u64 {
    exact_schedule(params).iter().map(|r| r.basic + r.rp).sum()
}

/// `√|data|`: beyond this query size the RP passes dominate.
pub fn break_even_q(data_size: u64) -> f64 {
    (data_size as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakEven {
    Below,
    At,
    Above,
}

impl BreakEven {
    pub fn classify(q: u64, data_size: u64) -> Self {
        let be = break_even_q(data_size);
        let q = q as f64;
        if (q - be).abs() < 1e-9 {
            BreakEven::At
        } else if q < be {
            BreakEven::Below
        } else {
            BreakEven::Above
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BreakEven::Below => "below break-even",
            BreakEven::At => "at break-even",
            BreakEven::Above => "above break-even",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: u64,
    pub formula: f64,
    pub approx: f64,
    pub exact: u64,
    pub rp_per_round_formula: f64,
    pub rp_per_round_exact: u64,
    pub break_even: BreakEven,
}

pub fn sweep(base: &CostParams, q_list: &[u64]) -> Result<Vec<SweepRow>, CostError> {
    if q_list.is_empty() {
        return Err(CostError::InvalidSpec("empty q list".into()));
    }
    q_list
        .iter()
        .map(|&q| {
            let p = CostParams { q, ..*base };
            p.validate()?;
            let r = redundancy_pool_size(q as usize, p.factor) as u64;
            Ok(SweepRow {
                q,
                formula: total_passes(&p),
                approx: total_passes_approx(&p),
                exact: total_passes_exact(&p),
                rp_per_round_formula: rp_passes_per_round(&p),
                rp_per_round_exact: rp_passes_exact(p.passes, r, q),
                break_even: BreakEven::classify(q, p.data_size),
            })
        })
        .collect()
}
