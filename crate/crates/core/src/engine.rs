//! The active-learning loop: train, score, select, annotate, append.
//!
//! An [`Engine`] owns the dataset, the pools, the network and the optimizer.
//! Simulated runs drive it with [`Engine::run`]; a human annotator drives it
//! one round at a time through [`Engine::begin_round`],
//! [`Engine::submit_label`] and [`Engine::complete_round`], and its state can
//! be persisted between sessions with [`Engine::state`] /
//! [`Engine::restore`].
//!
//! Each curve point is the test accuracy of a model trained from its initial
//! parameters on the labeled pool of that size. Point 0 is the seed alone.
//! A round scores the unlabeled pool with the model of the previous point,
//! selects and labels a query pool, appends it, resets, retrains and
//! evaluates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{self, AcquisitionError, QueryFunction, UncertaintyScore};
use crate::data::{self, DataError, Dataset, Example, PoolState, SplitFractions};
use crate::heuristics::{self, Acceptance, HeuristicError, RetParams};
use crate::metrics::{self, CurvePoint, LearningCurve};
use crate::model::{AdamConfig, AdamState, ModelError, Network, TrainOptions};
use crate::rng::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("annotation timed out")]
    Timeout,
    #[error("example {0:?} has no gold label")]
    MissingGold(String),
    #[error("oracle returned label {label} for {id:?}, outside [0, {num_classes})")]
    InvalidLabel { id: String, label: usize, num_classes: usize },
}

/// A source of labels.
pub trait Oracle {
    fn label(&mut self, example: &Example) -> std::result::Result<usize, OracleError>;
}

/// Replays gold labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct SimulatedOracle;

impl Oracle for SimulatedOracle {
    fn label(&mut self, example: &Example) -> std::result::Result<usize, OracleError> {
        example.label.ok_or_else(|| OracleError::MissingGold(example.id.clone()))
    }
}

/// Labels from a fixed table, e.g. answers collected from an annotator.
#[derive(Clone, Debug, Default)]
pub struct ScriptedOracle {
    pub labels: HashMap<String, usize>,
}

impl Oracle for ScriptedOracle {
    fn label(&mut self, example: &Example) -> std::result::Result<usize, OracleError> {
        self.labels.get(&example.id).copied().ok_or(OracleError::Timeout)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("the experiment has reached its labeling target")]
    Finished,
    #[error("the engine has not trained on the seed yet")]
    NotInitialized,
    #[error("no round is awaiting labels")]
    NoPendingRound,
    #[error("a round is already awaiting labels")]
    RoundPending,
    #[error("round {round} still has {remaining} unlabeled tasks")]
    RoundIncomplete { round: usize, remaining: usize },
    #[error("unknown example id {0:?}")]
    UnknownId(String),
    #[error("example {0:?} is not pending")]
    NotPending(String),
    #[error("label {label} is outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("invariant violated after round {round}: {reason}")]
    Invariant { round: usize, reason: String },
    #[error("persisted state is inconsistent: {0}")]
    CorruptState(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Query-pool size: an absolute count or a percentage of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QSpecRepr", into = "QSpecRepr")]
pub enum QSpec {
    Count(usize),
    Percent(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum QSpecRepr {
    Count(usize),
    Text(String),
}

impl TryFrom<QSpecRepr> for QSpec {
    type Error = String;

    fn try_from(r: QSpecRepr) -> std::result::Result<Self, String> {
        match r {
            QSpecRepr::Count(n) => Ok(QSpec::Count(n)),
            QSpecRepr::Text(s) => s.parse(),
        }
    }
}

impl From<QSpec> for QSpecRepr {
    fn from(q: QSpec) -> Self {
        match q {
            QSpec::Count(n) => QSpecRepr::Count(n),
            QSpec::Percent(_) => QSpecRepr::Text(q.to_string()),
        }
    }
}

impl FromStr for QSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            p.trim().parse::<f64>().map(QSpec::Percent).map_err(|e| format!("bad percentage {s:?}: {e}"))
        } else {
            s.parse::<usize>().map(QSpec::Count).map_err(|e| format!("bad query size {s:?}: {e}"))
        }
    }
}

impl fmt::Display for QSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QSpec::Count(n) => write!(f, "{n}"),
            QSpec::Percent(p) => write!(f, "{p}%"),
        }
    }
}

/// `max(1, round(p·N/100))` for percentages; counts pass through.
pub fn resolve_q(spec: QSpec, dataset_size: usize) -> Result<usize> {
    match spec {
        QSpec::Count(0) => Err(EngineError::InvalidConfig("q must be at least 1".into())),
        QSpec::Count(n) => Ok(n),
        QSpec::Percent(p) if p > 0.0 && p <= 100.0 => {
            Ok(((p * dataset_size as f64 / 100.0).round() as usize).max(1))
        }
        QSpec::Percent(p) => Err(EngineError::InvalidConfig(format!("percentage must be in (0, 100], got {p}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    None,
    /// Redundancy elimination by training.
    Ret,
    /// Redundancy elimination by cosine similarity.
    Recs,
    /// Uncertainty times KNN density.
    Sud,
}

impl Heuristic {
    pub fn name(self) -> &'static str {
        match self {
            Heuristic::None => "none",
            Heuristic::Ret => "ret",
            Heuristic::Recs => "recs",
            Heuristic::Sud => "sud",
        }
    }
}

impl FromStr for Heuristic {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Heuristic::None),
            "ret" => Ok(Heuristic::Ret),
            "recs" => Ok(Heuristic::Recs),
            "sud" => Ok(Heuristic::Sud),
            _ => Err(format!("unknown heuristic {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Simulated,
    Human,
}

/// Experiment configuration. Serialized as one flat JSON object; absent
/// fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    pub dataset: Option<std::path::PathBuf>,
    pub num_classes: Option<usize>,
    pub class_names: Option<Vec<String>>,
    /// Embed records lacking an `embedding` from their `text`.
    pub hash_embed_dim: Option<usize>,
    pub seed_fraction: f64,
    pub unlabeled_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub query_function: QueryFunction,
    pub heuristic: Heuristic,
    pub q: QSpec,
    /// Stochastic forward passes per example (`T`).
    pub passes: usize,
    pub dropout: f64,
    pub rp_factor: f64,
    pub recs_threshold: f64,
    pub sud_k: usize,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once this many examples are labeled; defaults to all of them.
    pub target_labeled: Option<usize>,
    pub global_seed: u64,
    pub oracle: OracleMode,
    /// Record per-round wall time. Off by default so curves are reproducible bit for bit.
    pub record_wall_time: bool,
    pub write_checkpoint: bool,
}

impl Default for AlConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        let adam = AdamConfig::default();
        AlConfig {
            dataset: None,
            num_classes: None,
            class_names: None,
            hash_embed_dim: None,
            seed_fraction: f.seed,
            unlabeled_fraction: f.unlabeled,
            dev_fraction: f.dev,
            test_fraction: f.test,
            query_function: QueryFunction::VariationRatio,
            heuristic: Heuristic::None,
            q: QSpec::Percent(1.0),
            passes: 10,
            dropout: 0.2,
            rp_factor: 1.5,
            recs_threshold: 0.0,
            sud_k: 10,
            hidden: vec![64],
            max_epochs: 15,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            target_labeled: None,
            global_seed: 0,
            oracle: OracleMode::Simulated,
            record_wall_time: false,
            write_checkpoint: false,
        }
    }
}

impl AlConfig {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            seed: self.seed_fraction,
            unlabeled: self.unlabeled_fraction,
            dev: self.dev_fraction,
            test: self.test_fraction,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    /// Checks the fields that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if self.passes == 0 {
            return bad("passes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.rp_factor.is_nan() || self.rp_factor < 1.0 || self.rp_factor.is_infinite() {
            return bad(format!("rp_factor must be at least 1, got {}", self.rp_factor));
        }
        if !self.recs_threshold.is_finite() {
            return bad("recs_threshold must be finite".into());
        }
        if self.sud_k == 0 {
            return bad("sud_k must be at least 1".into());
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.lr) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.epsilon) {
            return bad("invalid Adam hyperparameters".into());
        }
        if let QSpec::Count(0) = self.q {
            return bad("q must be at least 1".into());
        }
        if self.oracle == OracleMode::Human && self.heuristic == Heuristic::Ret {
            return bad("ret interleaves labeling with training and needs the simulated oracle".into());
        }
        if let (Some(names), Some(c)) = (&self.class_names, self.num_classes) {
            if names.len() != c {
                return bad(format!("{} class names for {c} classes", names.len()));
            }
        }
        Ok(())
    }
}

/// One point of the learning curve and what the round before it did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0 for the seed-only point.
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
    /// Best dev loss of the training run behind this point.
    pub dev_loss: f64,
    pub queried_ids: Vec<String>,
    /// Acquisition score of each queried id at selection time.
    pub queried_scores: Vec<f64>,
    pub queried_labels: Vec<usize>,
    /// `basic_passes + rp_passes`.
    pub forward_passes: u64,
    /// Passes spent scoring the whole unlabeled pool.
    pub basic_passes: u64,
    /// Passes spent rescoring the redundancy pool (RET only).
    pub rp_passes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rp_passes_per_iteration: Option<Vec<u64>>,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recs_certificates: Option<Vec<Acceptance>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingTask {
    pub example_id: String,
    pub score: f64,
}

/// A query pool waiting for labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingRound {
    pub round: usize,
    /// In descending score order.
    pub tasks: Vec<PendingTask>,
    pub labels: BTreeMap<String, usize>,
    pub basic_passes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recs_certificates: Option<Vec<Acceptance>>,
}

impl PendingRound {
    pub fn remaining(&self) -> usize {
        self.tasks.len() - self.labels.len()
    }

    pub fn unlabeled_tasks(&self) -> impl Iterator<Item = &PendingTask> {
        self.tasks.iter().filter(|t| !self.labels.contains_key(&t.example_id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SubmitOutcome {
    Recorded { remaining: usize },
}

/// Everything needed to resume an engine over the same dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub config: AlConfig,
    pub q: usize,
    pub target: usize,
    pub pools: PoolState,
    /// Labels of every labeled example, as assigned (gold for the seed).
    pub labels: BTreeMap<String, usize>,
    pub records: Vec<RoundRecord>,
    pub pending: Option<PendingRound>,
}

pub struct Engine {
    dataset: Dataset,
    config: AlConfig,
    q: usize,
    target: usize,
    active_size: usize,
    pools: PoolState,
    labels: BTreeMap<String, usize>,
    net: Network,
    adam: AdamState,
    records: Vec<RoundRecord>,
    pending: Option<PendingRound>,
    reset_probes: Vec<Vec<f64>>,
}

impl Engine {
    /// Validates the configuration against the dataset and splits the pools.
    /// No training happens until [`Engine::initialize`].
    pub fn new(dataset: Dataset, config: AlConfig) -> Result<Self> {
        config.validate()?;
        let pools = data::split(&dataset, config.fractions(), config.global_seed)?;
        Self::with_pools(dataset, config, pools)
    }

    /// Like [`Engine::new`] with an externally chosen split.
    pub fn with_pools(dataset: Dataset, config: AlConfig, pools: PoolState) -> Result<Self> {
        config.validate()?;
        let active_size = pools.active_size();
        pools.check(&dataset, active_size).map_err(EngineError::InvalidConfig)?;
        if !pools.seed.is_empty() && pools.labeled != pools.seed {
            return Err(EngineError::InvalidConfig("labeled pool must equal the seed at the start".into()));
        }
        if let Some(c) = config.num_classes {
            if c != dataset.num_classes {
                return Err(EngineError::InvalidConfig(format!("config says {c} classes, dataset has {}", dataset.num_classes)));
            }
        }
        if let Some(names) = &config.class_names {
            if names.len() != dataset.num_classes {
                return Err(EngineError::InvalidConfig(format!("{} class names for {} classes", names.len(), dataset.num_classes)));
            }
        }
        for id in pools.seed.iter().chain(&pools.dev).chain(&pools.test) {
            if dataset.get(id).and_then(|e| e.label).is_none() {
                return Err(EngineError::Oracle(OracleError::MissingGold(id.clone())));
            }
        }
        let q = resolve_q(config.q, dataset.len())?;
        let target = config.target_labeled.unwrap_or(active_size);
        if target > active_size {
            return Err(EngineError::InvalidConfig(format!(
                "target_labeled {target} exceeds labeled + unlabeled = {active_size}"
            )));
        }
        let mut dims = vec![dataset.dim];
        dims.extend(&config.hidden);
        dims.push(dataset.num_classes);
        let net = Network::new(&dims, config.dropout, rng::derive(config.global_seed, Stream::Init, &[]))?;
        let adam = AdamState::for_network(&net, config.adam());
        let labels = pools.seed.iter().map(|id| (id.clone(), dataset.get(id).and_then(|e| e.label).unwrap())).collect();
        Ok(Engine {
            dataset,
            config,
            q,
            target,
            active_size,
            pools,
            labels,
            net,
            adam,
            records: Vec::new(),
            pending: None,
            reset_probes: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &AlConfig {
        &self.config
    }

    /// Resolved query-pool size.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Resolved labeling target `n`.
    pub fn target(&self) -> usize {
        self.target
    }

    pub fn pools(&self) -> &PoolState {
        &self.pools
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn pending(&self) -> Option<&PendingRound> {
        self.pending.as_ref()
    }

    /// Deterministic output on the first dataset example, captured right
    /// after every reset.
    pub fn reset_probes(&self) -> &[Vec<f64>] {
        &self.reset_probes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.config
            .class_names
            .clone()
            .unwrap_or_else(|| (0..self.dataset.num_classes).map(|c| format!("class {c}")).collect())
    }

    pub fn is_initialized(&self) -> bool {
        !self.records.is_empty()
    }

    pub fn is_finished(&self) -> bool {
        self.pending.is_none() && (self.pools.labeled.len() >= self.target || self.pools.unlabeled.is_empty())
    }

    pub fn curve(&self) -> LearningCurve {
        LearningCurve::new(
            self.records
                .iter()
                .map(|r| CurvePoint { labeled_count: r.labeled_count, accuracy: r.test_accuracy })
                .collect(),
        )
        .expect("records have strictly increasing labeled counts")
    }

    /// Resets to the initial parameters, trains on the labeled pool and
    /// returns `(test accuracy, best dev loss)`. `key` selects the shuffle
    /// and training-dropout streams.
    fn retrain(&mut self, key: u64) -> Result<(f64, f64)> {
        self.net.reset(&mut self.adam);
        let probe = &self.dataset.examples()[0].embedding;
        self.reset_probes.push(self.net.forward(probe, crate::model::ForwardMode::Deterministic)?);
        let labeled: Vec<(&[f64], usize)> = self
            .pools
            .labeled
            .iter()
            .map(|id| (self.dataset.get(id).unwrap().embedding.as_slice(), self.labels[id]))
            .collect();
        let gold = |id: &String| {
            let e = self.dataset.get(id).unwrap();
            (e.embedding.as_slice(), e.label.unwrap())
        };
        let dev: Vec<(&[f64], usize)> = self.pools.dev.iter().map(gold).collect();
        let opts = TrainOptions {
            max_epochs: self.config.max_epochs,
            batch_size: self.config.batch_size,
            seed: rng::derive(self.config.global_seed, Stream::Shuffle, &[key]),
        };
        let report = self.net.train(&mut self.adam, &labeled, &dev, opts)?;
        let (preds, gold): (Vec<usize>, Vec<usize>) = self
            .pools
            .test
            .iter()
            .map(|id| {
                let (x, y) = gold(id);
                Ok((self.net.predict(x)?, y))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let acc = metrics::accuracy(&preds, &gold).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        Ok((acc, report.best_dev_loss()))
    }

    /// Trains on the seed and records point 0. A no-op if already done.
    pub fn initialize(&mut self) -> Result<&RoundRecord> {
        if self.records.is_empty() {
            let (test_accuracy, dev_loss) = self.retrain(0)?;
            self.records.push(RoundRecord {
                round: 0,
                labeled_count: self.pools.labeled.len(),
                test_accuracy,
                dev_loss,
                queried_ids: Vec::new(),
                queried_scores: Vec::new(),
                queried_labels: Vec::new(),
                forward_passes: 0,
                basic_passes: 0,
                rp_passes: 0,
                rp_passes_per_iteration: None,
                wall_time_ms: 0,
                recs_certificates: None,
            });
        }
        Ok(&self.records[0])
    }

    fn next_round(&self) -> usize {
        self.records.len()
    }

    fn unlabeled_examples(&self) -> Vec<&Example> {
        self.pools.unlabeled.iter().map(|id| self.dataset.get(id).unwrap()).collect()
    }

    fn examples_for(&self, ids: &[String]) -> Vec<&Example> {
        ids.iter().map(|id| self.dataset.get(id).unwrap()).collect()
    }

    fn check_ready(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(EngineError::NotInitialized);
        }
        if self.pending.is_some() {
            return Err(EngineError::RoundPending);
        }
        if self.pools.unlabeled.is_empty() {
            return Err(EngineError::EmptyPool);
        }
        if self.pools.labeled.len() >= self.target {
            return Err(EngineError::Finished);
        }
        Ok(())
    }

    /// Scores the unlabeled pool and ranks it (after density weighting for SUD).
    fn rank_pool(&self, round: usize) -> Result<(Vec<UncertaintyScore>, u64)> {
        let pool = self.unlabeled_examples();
        let scored = acquisition::score_pool(
            &self.net,
            &pool,
            self.config.passes,
            self.config.query_function,
            round as u64,
            self.config.global_seed,
        )?;
        let ranked = if self.config.heuristic == Heuristic::Sud {
            if pool.len() < 2 {
                scored.scores
            } else {
                let k = self.config.sud_k.min(pool.len() - 1);
                let densities = heuristics::pool_densities(&pool, k)?;
                heuristics::sud_scores(&scored.scores, &densities)?
            }
        } else {
            scored.scores
        };
        Ok((ranked, scored.forward_passes))
    }

    /// Selects the query pool for the next round without labeling it.
    /// Not available with RET, whose selection needs labels as it goes.
    pub fn begin_round(&mut self) -> Result<&PendingRound> {
        self.check_ready()?;
        if self.config.heuristic == Heuristic::Ret {
            return Err(EngineError::InvalidConfig("ret selects and labels in one step; use run_round".into()));
        }
        let round = self.next_round();
        let q = self.q.min(self.pools.unlabeled.len());
        let (ranked, basic_passes) = self.rank_pool(round)?;
        let (tasks, recs_certificates) = match self.config.heuristic {
            Heuristic::Recs => {
                let rp = heuristics::RedundancyPool::from_ranked(&ranked, q, self.config.rp_factor);
                let members = self.examples_for(&rp.member_ids);
                let sel = heuristics::recs_select(&members, q, self.config.recs_threshold)?;
                let score: HashMap<&str, f64> = ranked.iter().map(|s| (s.example_id.as_str(), s.value)).collect();
                let tasks = sel
                    .selected
                    .iter()
                    .map(|id| PendingTask { example_id: id.clone(), score: score[id.as_str()] })
                    .collect();
                (tasks, Some(sel.certificates))
            }
            _ => {
                let tasks = ranked[..q]
                    .iter()
                    .map(|s| PendingTask { example_id: s.example_id.clone(), score: s.value })
                    .collect();
                (tasks, None)
            }
        };
        self.pending = Some(PendingRound { round, tasks, labels: BTreeMap::new(), basic_passes, recs_certificates });
        Ok(self.pending.as_ref().unwrap())
    }

    /// Records one label for the pending round. Each task takes exactly one
    /// label. Checked in order: unknown id, label range, pending status.
    pub fn submit_label(&mut self, example_id: &str, label: usize) -> Result<SubmitOutcome> {
        let num_classes = self.dataset.num_classes;
        if !self.dataset.contains(example_id) {
            return Err(EngineError::UnknownId(example_id.to_string()));
        }
        if label >= num_classes {
            return Err(EngineError::InvalidLabel { label, num_classes });
        }
        let pending = self.pending.as_mut().ok_or(EngineError::NoPendingRound)?;
        if !pending.tasks.iter().any(|t| t.example_id == example_id) || pending.labels.contains_key(example_id) {
            return Err(EngineError::NotPending(example_id.to_string()));
        }
        pending.labels.insert(example_id.to_string(), label);
        Ok(SubmitOutcome::Recorded { remaining: pending.remaining() })
    }

    /// Appends a fully labeled query pool, retrains and records the point.
    pub fn complete_round(&mut self) -> Result<&RoundRecord> {
        self.complete_round_timed(None)
    }

    fn complete_round_timed(&mut self, started: Option<Instant>) -> Result<&RoundRecord> {
        let pending = self.pending.as_ref().ok_or(EngineError::NoPendingRound)?;
        if pending.remaining() > 0 {
            return Err(EngineError::RoundIncomplete { round: pending.round, remaining: pending.remaining() });
        }
        let pending = self.pending.take().unwrap();
        let ids: Vec<String> = pending.tasks.iter().map(|t| t.example_id.clone()).collect();
        let labels: Vec<usize> = ids.iter().map(|id| pending.labels[id]).collect();
        let record = RoundRecord {
            round: pending.round,
            labeled_count: 0,
            test_accuracy: 0.0,
            dev_loss: 0.0,
            queried_scores: pending.tasks.iter().map(|t| t.score).collect(),
            queried_ids: ids,
            queried_labels: labels,
            forward_passes: pending.basic_passes,
            basic_passes: pending.basic_passes,
            rp_passes: 0,
            rp_passes_per_iteration: None,
            wall_time_ms: 0,
            recs_certificates: pending.recs_certificates,
        };
        self.append_and_train(record, started)
    }

    fn append_and_train(&mut self, mut record: RoundRecord, started: Option<Instant>) -> Result<&RoundRecord> {
        self.pools.label(&record.queried_ids)?;
        for (id, &y) in record.queried_ids.iter().zip(&record.queried_labels) {
            self.labels.insert(id.clone(), y);
        }
        let (acc, dev_loss) = self.retrain(record.round as u64)?;
        record.labeled_count = self.pools.labeled.len();
        record.test_accuracy = acc;
        record.dev_loss = dev_loss;
        let started = started.filter(|_| self.config.record_wall_time);
        record.wall_time_ms = started.map_or(0, |t| t.elapsed().as_millis() as u64);
        self.check_invariants(&record)?;
        self.records.push(record);
        Ok(self.records.last().unwrap())
    }

    fn check_invariants(&self, record: &RoundRecord) -> Result<()> {
        let fail = |reason: String| Err(EngineError::Invariant { round: record.round, reason });
        if let Err(reason) = self.pools.check(&self.dataset, self.active_size) {
            return fail(reason);
        }
        if self.labels.len() != self.pools.labeled.len() || !self.pools.labeled.iter().all(|id| self.labels.contains_key(id)) {
            return fail("assigned labels do not match the labeled pool".into());
        }
        let prev = self.records.last().map_or(0, |r| r.labeled_count);
        if record.labeled_count <= prev {
            return fail(format!("labeled count did not grow ({prev} -> {})", record.labeled_count));
        }
        if let Some(certs) = &record.recs_certificates {
            let emb: HashMap<&str, &[f64]> =
                record.queried_ids.iter().map(|id| (id.as_str(), self.dataset.get(id).unwrap().embedding.as_slice())).collect();
            if let Err(reason) = heuristics::verify_recs_certificates(certs, &emb) {
                return fail(reason);
            }
        }
        Ok(())
    }

    /// One full round with labels from `oracle`.
    pub fn run_round(&mut self, oracle: &mut dyn Oracle) -> Result<&RoundRecord> {
        let started = Instant::now();
        if self.config.heuristic != Heuristic::Ret {
            self.begin_round()?;
            let ids: Vec<String> = self.pending.as_ref().unwrap().tasks.iter().map(|t| t.example_id.clone()).collect();
            for id in ids {
                let ex = self.dataset.get(&id).unwrap();
                let y = oracle.label(ex)?;
                if y >= self.dataset.num_classes {
                    self.pending = None;
                    return Err(OracleError::InvalidLabel { id, label: y, num_classes: self.dataset.num_classes }.into());
                }
                self.submit_label(&id, y)?;
            }
            return self.complete_round_timed(Some(started));
        }
        self.check_ready()?;
        let round = self.next_round();
        let q = self.q.min(self.pools.unlabeled.len());
        let (ranked, basic_passes) = self.rank_pool(round)?;
        let rp = heuristics::RedundancyPool::from_ranked(&ranked, q, self.config.rp_factor);
        let members: Vec<Example> = self.examples_for(&rp.member_ids).into_iter().cloned().collect();
        let member_refs: Vec<&Example> = members.iter().collect();
        let params = RetParams {
            q,
            passes: self.config.passes,
            function: self.config.query_function,
            round: round as u64,
            seed: self.config.global_seed,
        };
        let sel = heuristics::ret_select(&mut self.net, &mut self.adam, &member_refs, params, oracle)?;
        let score: HashMap<&str, f64> = ranked.iter().map(|s| (s.example_id.as_str(), s.value)).collect();
        let rp_passes = sel.rp_passes();
        let record = RoundRecord {
            round,
            labeled_count: 0,
            test_accuracy: 0.0,
            dev_loss: 0.0,
            queried_ids: sel.selected.iter().map(|(id, _)| id.clone()).collect(),
            queried_scores: sel.selected.iter().map(|(id, _)| score[id.as_str()]).collect(),
            queried_labels: sel.selected.iter().map(|&(_, y)| y).collect(),
            forward_passes: basic_passes + rp_passes,
            basic_passes,
            rp_passes,
            rp_passes_per_iteration: Some(sel.passes_per_iteration),
            wall_time_ms: 0,
            recs_certificates: None,
        };
        self.append_and_train(record, Some(started))
    }

    /// Trains on the seed if needed, then runs rounds until the labeling
    /// target is reached or the unlabeled pool is exhausted.
    pub fn run(&mut self, oracle: &mut dyn Oracle) -> Result<LearningCurve> {
        self.initialize()?;
        while !self.is_finished() {
            self.run_round(oracle)?;
        }
        Ok(self.curve())
    }

    pub fn state(&self) -> EngineState {
        EngineState {
            config: self.config.clone(),
            q: self.q,
            target: self.target,
            pools: self.pools.clone(),
            labels: self.labels.clone(),
            records: self.records.clone(),
            pending: self.pending.clone(),
        }
    }

    /// Rebuilds an engine from persisted state. The network is retrained on
    /// the persisted labeled pool with the same stream keys, which reproduces
    /// the model the state was saved with.
    pub fn restore(dataset: Dataset, state: EngineState) -> Result<Self> {
        let corrupt = |m: String| EngineError::CorruptState(m);
        let initial = data::split(&dataset, state.config.fractions(), state.config.global_seed)?;
        let mut engine = Self::with_pools(dataset, state.config, initial)?;
        if engine.q != state.q || engine.target != state.target {
            return Err(corrupt("query size or target disagrees with the config".into()));
        }
        if state.pools.seed != engine.pools.seed || state.pools.dev != engine.pools.dev || state.pools.test != engine.pools.test {
            return Err(corrupt("pools do not match the configured split".into()));
        }
        state.pools.check(&engine.dataset, engine.active_size).map_err(corrupt)?;
        if state.labels.len() != state.pools.labeled.len() || state.labels.iter().any(|(id, &y)| !state.pools.labeled.contains(id) || y >= engine.dataset.num_classes) {
            return Err(corrupt("labels do not match the labeled pool".into()));
        }
        if let Some(p) = &state.pending {
            if state.records.is_empty() || p.round != state.records.len() {
                return Err(corrupt("pending round is out of sequence".into()));
            }
            for t in &p.tasks {
                if !state.pools.unlabeled.contains(&t.example_id) {
                    return Err(corrupt(format!("pending task {:?} is not unlabeled", t.example_id)));
                }
            }
            if p.labels.keys().any(|id| !p.tasks.iter().any(|t| &t.example_id == id)) || p.labels.values().any(|&y| y >= engine.dataset.num_classes) {
                return Err(corrupt("pending labels do not match the tasks".into()));
            }
        }
        match state.records.last() {
            None if state.pools.labeled != state.pools.seed => return Err(corrupt("labels beyond the seed but no records".into())),
            Some(r) if r.labeled_count != state.pools.labeled.len() => {
                return Err(corrupt("last record disagrees with the labeled pool".into()))
            }
            _ => {}
        }
        engine.pools = state.pools;
        engine.labels = state.labels;
        if let Some(last) = state.records.last() {
            engine.retrain(last.round as u64)?;
        }
        engine.records = state.records;
        engine.pending = state.pending;
        Ok(engine)
    }
}
