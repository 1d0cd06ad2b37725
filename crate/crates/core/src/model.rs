//! Feed-forward softmax classifier with dropout, trained with Adam.
//!
//! Parameters live in one flat vector: for each layer the weight matrix
//! (row-major, `out × in`) followed by the bias vector. Dropout is applied
//! to the input of every layer, i.e. to the raw input and to each hidden
//! activation, and is inverted (kept units are scaled by `1 / (1 - p)`) so
//! deterministic inference needs no rescaling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} components, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} is outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("network needs at least an input and an output layer of positive width, got {0:?}")]
    InvalidArchitecture(Vec<usize>),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("dev set is empty")]
    EmptyDevSet,
    #[error("invalid softmax samples: {0}")]
    InvalidSamples(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    Deterministic,
    Dropout { mask_seed: u64 },
}

/// `T × C` matrix of per-pass softmax outputs for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxSamples {
    passes: usize,
    classes: usize,
    data: Vec<f64>,
}

impl SoftmaxSamples {
    /// Validates that every row is a probability vector.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let passes = rows.len();
        let classes = rows.first().map(Vec::len).unwrap_or(0);
        if passes == 0 || classes == 0 {
            return Err(ModelError::InvalidSamples("need at least one pass and one class".into()));
        }
        let mut data = Vec::with_capacity(passes * classes);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != classes {
                return Err(ModelError::InvalidSamples(format!("row {t} has {} entries, expected {classes}", row.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(ModelError::InvalidSamples(format!("row {t} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ModelError::InvalidSamples(format!("row {t} sums to {sum}")));
            }
            data.extend(row);
        }
        Ok(SoftmaxSamples { passes, classes, data })
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn for_network(net: &Network, config: AdamConfig) -> Self {
        Self::new(net.num_params(), config)
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    dims: Vec<usize>,
    dropout: f64,
    rng_seed: u64,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
    initial: Vec<f64>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.dropout == other.dropout
            && self.rng_seed == other.rng_seed
            && self.params == other.params
            && self.initial == other.initial
    }
}

/// Forward-pass record needed for backpropagation.
struct Trace {
    /// Input to each layer after dropout.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Seeds the shuffle and training-dropout streams.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub dev_losses: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best_dev_loss(&self) -> f64 {
        self.dev_losses[self.best_epoch]
    }
}

impl Network {
    /// Glorot-uniform weights, zero biases, drawn from the init stream of `rng_seed`.
    pub fn new(dims: &[usize], dropout: f64, rng_seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::InvalidArchitecture(dims.to_vec()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::InvalidDropout(dropout));
        }
        let mut shapes = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for pair in dims.windows(2) {
            let (inp, out) = (pair[0], pair[1]);
            shapes.push(LayerShape { inp, out, w: offset, b: offset + inp * out });
            offset += inp * out + out;
        }
        let mut params = vec![0.0; offset];
        let mut init_rng = rng::stream_rng(rng_seed, Stream::Init, &[]);
        for s in &shapes {
            let bound = (6.0 / (s.inp + s.out) as f64).sqrt();
            for w in &mut params[s.w..s.w + s.inp * s.out] {
                *w = init_rng.random_range(-bound..bound);
            }
        }
        Ok(Network { dims: dims.to_vec(), dropout, rng_seed, shapes, initial: params.clone(), params })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn initial_snapshot(&self) -> &[f64] {
        &self.initial
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(ModelError::InvalidLabel { label: y, num_classes: self.num_classes() });
        }
        Ok(())
    }

    /// Per-site multiplicative masks: 0 for dropped units, `1/(1-p)` for kept ones.
    fn sample_masks(&self, mask_seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let scale = 1.0 / (1.0 - self.dropout);
        self.shapes
            .iter()
            .map(|s| {
                (0..s.inp)
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { scale })
                    .collect()
            })
            .collect()
    }

    fn trace(&self, params: &[f64], x: &[f64], masks: Option<&[Vec<f64>]>) -> Trace {
        let n = self.shapes.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut act = x.to_vec();
        for (l, s) in self.shapes.iter().enumerate() {
            if let Some(masks) = masks {
                act.iter_mut().zip(&masks[l]).for_each(|(a, m)| *a *= m);
            }
            let w = &params[s.w..s.w + s.inp * s.out];
            let b = &params[s.b..s.b + s.out];
            let z: Vec<f64> = (0..s.out)
                .map(|o| {
                    let row = &w[o * s.inp..(o + 1) * s.inp];
                    b[o] + row.iter().zip(&act).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            let next = if l + 1 < n { z.iter().map(|&v| v.max(0.0)).collect() } else { z.clone() };
            inputs.push(std::mem::replace(&mut act, next));
            pre.push(z);
        }
        Trace { inputs, pre, logits: act }
    }

    fn masks_for(&self, mode: ForwardMode) -> Option<Vec<Vec<f64>>> {
        match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Dropout { mask_seed } => Some(self.sample_masks(mask_seed)),
        }
    }

    pub fn forward(&self, x: &[f64], mode: ForwardMode) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let masks = self.masks_for(mode);
        Ok(softmax(&self.trace(&self.params, x, masks.as_deref()).logits))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x, ForwardMode::Deterministic)?))
    }

    /// Cross-entropy of `(x, y)` under the given mode.
    pub fn loss(&self, x: &[f64], y: usize, mode: ForwardMode) -> Result<f64> {
        self.check_input(x)?;
        self.check_label(y)?;
        let masks = self.masks_for(mode);
        Ok(cross_entropy(&self.trace(&self.params, x, masks.as_deref()).logits, y))
    }

    /// Mean deterministic cross-entropy over a set.
    pub fn mean_loss(&self, set: &[(&[f64], usize)]) -> Result<f64> {
        let mut total = 0.0;
        for &(x, y) in set {
            total += self.loss(x, y, ForwardMode::Deterministic)?;
        }
        Ok(total / set.len() as f64)
    }

    /// `T` stochastic forward passes; pass `t` uses the mask seed derived
    /// from `(rng_seed, round, t, example_id)`.
    pub fn mc_samples(&self, x: &[f64], example_id: &str, passes: usize, round: u64) -> Result<SoftmaxSamples> {
        self.check_input(x)?;
        let rows = (0..passes as u64)
            .map(|t| {
                let seed = rng::pass_seed(self.rng_seed, round, t, example_id);
                softmax(&self.trace(&self.params, x, Some(&self.sample_masks(seed))).logits)
            })
            .collect();
        SoftmaxSamples::new(rows)
    }

    /// Accumulates the cross-entropy gradient of one example into `grad`.
    fn backprop(&self, x: &[f64], y: usize, masks: Option<&[Vec<f64>]>, grad: &mut [f64]) -> f64 {
        let tr = self.trace(&self.params, x, masks);
        let loss = cross_entropy(&tr.logits, y);
        let mut delta = softmax(&tr.logits);
        delta[y] -= 1.0;
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let input = &tr.inputs[l];
            for o in 0..s.out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[s.b + o] += d;
                let g = &mut grad[s.w + o * s.inp..s.w + (o + 1) * s.inp];
                g.iter_mut().zip(input).for_each(|(gi, ai)| *gi += d * ai);
            }
            if l == 0 {
                break;
            }
            let w = &self.params[s.w..s.w + s.inp * s.out];
            let mut prev = vec![0.0; s.inp];
            for o in 0..s.out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * s.inp..(o + 1) * s.inp];
                    prev.iter_mut().zip(row).for_each(|(p, wi)| *p += d * wi);
                }
            }
            // Through the dropout mask of layer l, then the ReLU of layer l-1.
            let below = &tr.pre[l - 1];
            for i in 0..s.inp {
                let m = masks.map_or(1.0, |m| m[l][i]);
                prev[i] *= if below[i] > 0.0 { m } else { 0.0 };
            }
            delta = prev;
        }
        loss
    }

    /// Analytic gradient of the deterministic cross-entropy.
    pub fn gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(y)?;
        let mut grad = vec![0.0; self.num_params()];
        self.backprop(x, y, None, &mut grad);
        Ok(grad)
    }

    /// Mini-batch training with dropout active and early stopping on dev
    /// loss. The parameters of the epoch with the lowest dev loss (earliest
    /// on ties) are kept.
    pub fn train(
        &mut self,
        adam: &mut AdamState,
        labeled: &[(&[f64], usize)],
        dev: &[(&[f64], usize)],
        opts: TrainOptions,
    ) -> Result<TrainReport> {
        if labeled.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        if dev.is_empty() {
            return Err(ModelError::EmptyDevSet);
        }
        for &(x, y) in labeled.iter().chain(dev) {
            self.check_input(x)?;
            self.check_label(y)?;
        }
        let epochs = opts.max_epochs.max(1);
        let batch = opts.batch_size.max(1);
        let mut shuffle_rng = rng::stream_rng(opts.seed, Stream::Shuffle, &[]);
        let mut dropout_rng = rng::stream_rng(opts.seed, Stream::TrainDropout, &[]);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut grad = vec![0.0; self.num_params()];
        let mut dev_losses = Vec::with_capacity(epochs);
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for epoch in 0..epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in chunk {
                    let (x, y) = labeled[i];
                    let masks = self.sample_masks(dropout_rng.next_u64());
                    self.backprop(x, y, Some(&masks), &mut grad);
                }
                let scale = 1.0 / chunk.len() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                adam.update(&mut self.params, &grad);
            }
            let dev_loss = self.mean_loss(dev)?;
            dev_losses.push(dev_loss);
            let improved = match &best {
                None => true,
                Some((_, b, _)) => dev_loss < *b || (b.is_nan() && !dev_loss.is_nan()),
            };
            if improved {
                best = Some((epoch, dev_loss, self.params.clone()));
            }
        }
        let (best_epoch, _, params) = best.expect("at least one epoch ran");
        self.params = params;
        Ok(TrainReport { dev_losses, best_epoch })
    }

    /// One Adam step on a batch of one, with dropout masks from `mask_seed`.
    pub fn train_one_example(&mut self, adam: &mut AdamState, x: &[f64], y: usize, mask_seed: u64) -> Result<()> {
        self.check_input(x)?;
        self.check_label(y)?;
        let mut grad = vec![0.0; self.num_params()];
        let masks = self.sample_masks(mask_seed);
        self.backprop(x, y, Some(&masks), &mut grad);
        adam.update(&mut self.params, &grad);
        Ok(())
    }

    /// Restores the construction-time parameters and clears the optimizer.
    pub fn reset(&mut self, adam: &mut AdamState) {
        self.params.copy_from_slice(&self.initial);
        adam.reset();
    }

    /// Largest relative error between the analytic gradient and central
    /// finite differences with step `h`, over all parameters. Dropout is off.
    ///
    /// The relative error of a component is `|a - n| / max(|a|, |n|, 1e-6)`;
    /// the floor keeps vanishing components from dividing fp noise by zero.
    pub fn gradient_check(&self, x: &[f64], y: usize, h: f64) -> Result<f64> {
        let analytic = self.gradient(x, y)?;
        let mut params = self.params.clone();
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let plus = cross_entropy(&self.trace(&params, x, None).logits, y);
            params[i] = orig - h;
            let minus = cross_entropy(&self.trace(&params, x, None).logits, y);
            params[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    /// Writes a JSON header line followed by the parameters as little-endian f64.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            layer_dims: self.dims.clone(),
            dropout: self.dropout,
            rng_seed: self.rng_seed,
            num_params: self.params.len(),
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.write_all(b"\n")?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a checkpoint. The initial snapshot is regenerated from the
    /// header's seed, so `reset` behaves as on the original network.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut net = Network::new(&header.layer_dims, header.dropout, header.rng_seed)?;
        if header.num_params != net.num_params() {
            return Err(ModelError::Checkpoint(format!(
                "header declares {} parameters, layer_dims imply {}",
                header.num_params,
                net.num_params()
            )));
        }
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        if buf.len() != 8 * header.num_params {
            return Err(ModelError::Checkpoint(format!("expected {} payload bytes, found {}", 8 * header.num_params, buf.len())));
        }
        for (p, bytes) in net.params.iter_mut().zip(buf.chunks_exact(8)) {
            *p = f64::from_le_bytes(bytes.try_into().unwrap());
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_dims: Vec<usize>,
    dropout: f64,
    rng_seed: u64,
    num_params: usize,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
