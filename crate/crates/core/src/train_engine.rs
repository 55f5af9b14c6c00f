//! Training: per-sample reverse-mode gradients, Adam, per-size label
//! normalization, the size-homogeneous batch scheduler and metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fno_model::{
    backward_trace, forward_trace, DropoutSource, EdgeContext, GradientSet, ModelConfig, ModelParams,
};
use crate::grid::VoxelGrid;
use crate::porous_gen::{split_counts, splitmix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateGranularity {
    PerMinibatch,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub update_granularity: UpdateGranularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 50,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            update_granularity: UpdateGranularity::PerMinibatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be > 0"));
        }
        Ok(())
    }
}

/// Min/max label per edge length, fitted on training labels only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub k_min: f64,
    pub k_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeNormalizer {
    ranges: BTreeMap<usize, SizeRange>,
}

impl SizeNormalizer {
    /// Fit from `(edge length, permeability)` pairs of the training split.
    pub fn fit(labels: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut ranges: BTreeMap<usize, SizeRange> = BTreeMap::new();
        for (n, k) in labels {
            if !k.is_finite() {
                return Err(Error::Data(format!("non-finite label {k} at edge length {n}")));
            }
            let r = ranges.entry(n).or_insert(SizeRange { k_min: k, k_max: k });
            r.k_min = r.k_min.min(k);
            r.k_max = r.k_max.max(k);
        }
        for (n, r) in &ranges {
            if !(r.k_max > r.k_min) {
                return Err(Error::Data(format!(
                    "training labels at edge length {n} have no spread (min = max = {})",
                    r.k_min
                )));
            }
        }
        Ok(Self { ranges })
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.keys().copied()
    }

    pub fn range(&self, n: usize) -> Result<SizeRange> {
        self.ranges.get(&n).copied().ok_or(Error::UnknownSize(n))
    }

    /// Range for any edge length: registered sizes are exact, others are
    /// linearly interpolated (or extrapolated) in `n` from the two nearest
    /// registered sizes, or copied when only one size is registered.
    pub fn range_for_unseen(&self, n: usize) -> Result<SizeRange> {
        if let Some(r) = self.ranges.get(&n) {
            return Ok(*r);
        }
        let keys: Vec<usize> = self.ranges.keys().copied().collect();
        let (a, b) = match keys.len() {
            0 => return Err(Error::UnknownSize(n)),
            1 => return Ok(self.ranges[&keys[0]]),
            len => {
                let hi = keys.partition_point(|&k| k < n).clamp(1, len - 1);
                (keys[hi - 1], keys[hi])
            }
        };
        let t = (n as f64 - a as f64) / (b as f64 - a as f64);
        let (ra, rb) = (self.ranges[&a], self.ranges[&b]);
        let r = SizeRange {
            k_min: ra.k_min + t * (rb.k_min - ra.k_min),
            k_max: ra.k_max + t * (rb.k_max - ra.k_max),
        };
        if !(r.k_max > r.k_min) {
            return Err(Error::Data(format!(
                "extrapolated label range for edge length {n} is empty"
            )));
        }
        Ok(r)
    }

    pub fn normalize(&self, k: f64, n: usize) -> Result<f64> {
        let r = self.range(n)?;
        Ok((k - r.k_min) / (r.k_max - r.k_min))
    }

    pub fn denormalize(&self, k_hat: f64, n: usize) -> Result<f64> {
        let r = self.range(n)?;
        Ok(r.k_min + k_hat * (r.k_max - r.k_min))
    }

    /// Denormalize with [`SizeNormalizer::range_for_unseen`].
    pub fn denormalize_any(&self, k_hat: f64, n: usize) -> Result<f64> {
        let r = self.range_for_unseen(n)?;
        Ok(r.k_min + k_hat * (r.k_max - r.k_min))
    }
}

/// Free function form of [`SizeNormalizer::normalize`].
pub fn normalize_labels(k: f64, n: usize, norm: &SizeNormalizer) -> Result<f64> {
    norm.normalize(k, n)
}

pub fn mse_loss(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::shape(format!(
            "loss needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let sum: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(truths: &[f64], predictions: &[f64]) -> Result<f64> {
    if truths.len() != predictions.len() || truths.len() < 2 {
        return Err(Error::shape(format!(
            "R2 needs equal lengths >= 2, got {} and {}",
            truths.len(),
            predictions.len()
        )));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R2 of truths with zero variance".into()));
    }
    let ss_res: f64 = truths.iter().zip(predictions).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// One training or evaluation input with its normalized target.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    /// Stable identifier; keys the dropout stream.
    pub id: usize,
    pub voxels: &'a VoxelGrid,
    pub target: f64,
}

/// Spectral operators for every edge length in play.
#[derive(Clone, Debug, Default)]
pub struct EdgeContexts {
    by_edge: BTreeMap<usize, EdgeContext>,
}

impl EdgeContexts {
    pub fn for_sizes(cfg: &ModelConfig, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut by_edge = BTreeMap::new();
        for n in sizes {
            if let std::collections::btree_map::Entry::Vacant(e) = by_edge.entry(n) {
                e.insert(EdgeContext::new(cfg, n)?);
            }
        }
        Ok(Self { by_edge })
    }

    pub fn for_examples(cfg: &ModelConfig, examples: &[Example]) -> Result<Self> {
        Self::for_sizes(cfg, examples.iter().map(|e| e.voxels.edge()))
    }

    pub fn get(&self, n: usize) -> Result<&EdgeContext> {
        self.by_edge
            .get(&n)
            .ok_or_else(|| Error::shape(format!("no spectral context prepared for edge length {n}")))
    }
}

fn dropout_rng(seed: u64, epoch: usize, id: usize) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed ^ 0xD50F_0D50) ^ epoch as u64) ^ id as u64);
    ChaCha8Rng::seed_from_u64(key)
}

/// Prediction and squared error of one sample, with the gradient of
/// `scale * (p - t)^2` accumulated into a fresh gradient set.
pub fn sample_gradient(
    example: &Example,
    params: &ModelParams,
    ctx: &EdgeContext,
    dropout: Option<(u64, usize)>,
    scale: f64,
) -> Result<(f64, f64, GradientSet)> {
    let mut rng = dropout.map(|(seed, epoch)| dropout_rng(seed, epoch, example.id));
    let mut src = rng.as_mut().map(DropoutSource::new);
    let trace = forward_trace(example.voxels, params, ctx, src.as_mut())?;
    let p = trace.output();
    let residual = p - example.target;
    let mut grads = params.zeros_like();
    backward_trace(&trace, params, ctx, scale * 2.0 * residual, &mut grads);
    Ok((p, residual * residual, grads))
}

/// Mean squared error over `batch` and its exact gradient. Samples run in
/// parallel; their gradients are summed in batch order.
pub fn backward(
    batch: &[Example],
    params: &ModelParams,
    ctxs: &EdgeContexts,
    dropout: Option<(u64, usize)>,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, f64, GradientSet)> = batch
        .par_iter()
        .map(|ex| sample_gradient(ex, params, ctxs.get(ex.voxels.edge())?, dropout, scale))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (_, sq, g) in &parts {
        loss += sq;
        grads.add_scaled(g, 1.0);
    }
    Ok((loss * scale, grads))
}

/// Eval-mode predictions (no dropout), in input order.
pub fn predict(examples: &[Example], params: &ModelParams, ctxs: &EdgeContexts) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| Ok(forward_trace(ex.voxels, params, ctxs.get(ex.voxels.edge())?, None)?.output()))
        .collect()
}

/// Eval-mode MSE against the normalized targets.
pub fn evaluate_loss(examples: &[Example], params: &ModelParams, ctxs: &EdgeContexts) -> Result<f64> {
    let preds = predict(examples, params, ctxs)?;
    let truths: Vec<f64> = examples.iter().map(|e| e.target).collect();
    mse_loss(&preds, &truths)
}

/// First and second moment estimates with the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam; complex entries are two independent coordinates.
pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Size-homogeneous batches for one epoch. `groups` maps edge length to
/// example positions; each group is shuffled under `(seed, epoch, n)`,
/// cut into batches (the last may be short), and batches are taken
/// cyclically across sizes in `order`.
pub fn schedule_batches(
    groups: &BTreeMap<usize, Vec<usize>>,
    order: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let smallest = groups.values().map(Vec::len).min().unwrap_or(0);
    if batch_size > smallest {
        return Err(Error::config(format!(
            "batch_size {batch_size} exceeds the smallest size group ({smallest} samples)"
        )));
    }
    let mut queues: Vec<std::vec::IntoIter<Vec<usize>>> = Vec::with_capacity(order.len());
    for &n in order {
        let mut members = groups
            .get(&n)
            .ok_or_else(|| Error::config(format!("size {n} in batch order has no samples")))?
            .clone();
        let key = splitmix64(splitmix64(splitmix64(seed ^ 0x5EED_BA7C) ^ epoch as u64) ^ n as u64);
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        let batches: Vec<Vec<usize>> = members.chunks(batch_size).map(<[usize]>::to_vec).collect();
        queues.push(batches.into_iter());
    }
    if order.len() != groups.len() {
        return Err(Error::config("batch order must list every size exactly once"));
    }
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for q in queues.iter_mut() {
            if let Some(b) = q.next() {
                out.push(b);
            }
        }
        if out.len() == before {
            return Ok(out);
        }
    }
}

/// Positions of `examples` grouped by edge length.
pub fn group_by_size(examples: &[Example]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.voxels.edge()).or_default().push(i);
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode squared error over every sample seen this epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

fn divergence(state: &AdamState, what: &str, value: f64) -> Error {
    Error::Divergence {
        step: state.t,
        msg: format!("{what} became {value}"),
    }
}

/// One pass over the training split followed by an eval-mode validation
/// loss. `epoch` counts from 1 and keys the shuffles and dropout masks.
pub fn train_epoch(
    train: &[Example],
    val: &[Example],
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
    ctxs: &EdgeContexts,
    epoch: usize,
) -> Result<EpochRecord> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let groups = group_by_size(train);
    let order: Vec<usize> = groups.keys().copied().collect();
    let batches = schedule_batches(&groups, &order, cfg.batch_size, cfg.seed, epoch)?;
    let mut total = 0.0;
    let mut accumulated = match cfg.update_granularity {
        UpdateGranularity::PerEpoch => Some(params.zeros_like()),
        UpdateGranularity::PerMinibatch => None,
    };
    for batch in &batches {
        let members: Vec<Example> = batch.iter().map(|&i| train[i]).collect();
        let (loss, grads) = backward(&members, params, ctxs, Some((cfg.seed, epoch)))?;
        if !loss.is_finite() {
            return Err(divergence(state, "training loss", loss));
        }
        total += loss * members.len() as f64;
        match accumulated.as_mut() {
            Some(acc) => acc.add_scaled(&grads, 1.0 / batches.len() as f64),
            None => adam_step(params, &grads, state, cfg),
        }
    }
    if let Some(acc) = accumulated {
        adam_step(params, &acc, state, cfg);
    }
    if !params.is_finite() {
        return Err(divergence(state, "a parameter", f64::NAN));
    }
    let val_loss = evaluate_loss(val, params, ctxs)?;
    if !val_loss.is_finite() {
        return Err(divergence(state, "validation loss", val_loss));
    }
    Ok(EpochRecord {
        epoch,
        train_loss: total / train.len() as f64,
        val_loss,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters at the lowest validation loss (the initialization when no epoch ran).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
}

/// Run `cfg.epochs` epochs from `init`, calling `on_epoch` after each.
pub fn fit(
    train: &[Example],
    val: &[Example],
    init: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let all: Vec<Example> = train.iter().chain(val).copied().collect();
    let ctxs = EdgeContexts::for_examples(init.config(), &all)?;
    let mut params = init.clone();
    let mut state = AdamState::new(&params);
    let mut best = init;
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let rec = train_epoch(train, val, &mut params, &mut state, cfg, &ctxs, epoch)?;
        if rec.val_loss < best_val {
            best_val = rec.val_loss;
            best = params.clone();
            best_epoch = epoch;
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        last: params,
    })
}

/// `epoch,train_loss,val_loss` with shortest round-trip float formatting.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

/// Index lists of a train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle within each edge length, then 80/10/10 per size.
pub fn split_by_size(edges: &[usize], seed: u64) -> Splits {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in edges.iter().enumerate() {
        groups.entry(n).or_default().push(i);
    }
    let mut out = Splits::default();
    for (n, mut members) in groups {
        let key = splitmix64(splitmix64(seed ^ 0x5971_7700) ^ n as u64);
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        let (tr, va, _) = split_counts(members.len());
        out.train.extend_from_slice(&members[..tr]);
        out.val.extend_from_slice(&members[tr..tr + va]);
        out.test.extend_from_slice(&members[tr + va..]);
    }
    out
}
