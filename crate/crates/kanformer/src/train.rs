//! Training: Adam with decoupled weight decay, class-weighted
//! cross-entropy, early stopping on dev loss, top-k checkpoint tracking by
//! dev EER, and checkpoint persistence.
//!
//! Checkpoint layout (KFCK, little-endian): magic `KFCK`, u32 version,
//! 32-byte model-config hash, then per parameter: u32 name length, name
//! bytes, u32 ndim, ndim × u32 extents, f64 payload.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, ScoreSet};
use crate::model::{KanformerModel, Mode};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn default_lr() -> f64 { 1e-3 }
fn default_wd() -> f64 { 1e-4 }
fn default_beta1() -> f64 { 0.9 }
fn default_beta2() -> f64 { 0.999 }
fn default_adam_eps() -> f64 { 1e-8 }
fn default_max_epochs() -> usize { 50 }
fn default_patience() -> usize { 7 }
fn default_top_k() -> usize { 5 }
fn default_batch_size() -> usize { 8 }
fn default_kan_smoothing() -> f64 { 0.01 }

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Desk-scale default. For the full-scale fine-tuning recipe this
    /// crate's protocol mirrors (a large pre-trained encoder adapted to the
    /// task), use [`TrainConfig::full_scale`] with its 1e-6 rate.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub top_k: usize,
    pub batch_size: usize,
    /// When set, additionally average the top-k checkpoint weights and
    /// report that model's metrics next to the default metric averaging.
    pub average_weights: bool,
    /// Curvature penalty on Chebyshev coefficients of degree >= 2, added
    /// to the classification loss as
    /// `kan_smoothing · mean_per_tensor(j² · c²)`. The univariate basis
    /// memorizes aggressively under Adam without it; the constant and
    /// linear terms stay unpenalized.
    pub kan_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            top_k: default_top_k(),
            batch_size: default_batch_size(),
            average_weights: false,
            kan_smoothing: default_kan_smoothing(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the full-scale fine-tuning setup (constant
    /// learning rate 1e-6, weight decay 1e-4). Documented for fidelity;
    /// training this crate's small models from scratch at 1e-6 would not
    /// converge in reasonable time.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("adam betas must lie in [0, 1)".into());
        }
        if self.patience == 0 {
            problems.push("patience must be at least 1".into());
        }
        if self.top_k == 0 {
            problems.push("top_k must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            problems.push("batch_size and max_epochs must be positive".into());
        }
        if self.kan_smoothing < 0.0 {
            problems.push(format!("kan_smoothing {} must be nonnegative", self.kan_smoothing));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// First/second moment estimates, index-aligned with the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| vec![0.0; if p.trainable { p.value.numel() } else { 0 }])
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One optimizer step over all trainable parameters. Weight decay is
/// decoupled: p ← p − lr·wd·p before the moment update.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (_, p) in store.iter() {
        if p.trainable {
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}' is {bad}",
                    p.name
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, (_, p)) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let g = p.grad.data().to_vec();
        let data = p.value.data_mut();
        for i in 0..data.len() {
            data[i] -= cfg.learning_rate * cfg.weight_decay * data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

// ── trackers ─────────────────────────────────────────────────────────

/// Stops when the observed loss has not improved for `patience`
/// consecutive observations.
#[derive(Debug)]
pub(crate) struct EarlyStopper {
    patience: usize,
    best: f64,
    since_improvement: usize,
}

impl EarlyStopper {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_improvement: 0,
        }
    }

    /// Returns true when training should stop after this observation.
    pub(crate) fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }
}

/// A checkpoint retained by the top-k tracker.
#[derive(Debug, Clone)]
pub struct TopCheckpoint {
    pub epoch: usize,
    pub dev_eer: f64,
    pub dev_loss: f64,
    pub snapshot: Vec<f64>,
}

/// Keeps the k best checkpoints by dev EER (ties break toward the earlier
/// epoch).
#[derive(Debug, Default)]
pub(crate) struct TopKTracker {
    k: usize,
    entries: Vec<TopCheckpoint>,
}

impl TopKTracker {
    pub(crate) fn new(k: usize) -> Self {
        TopKTracker { k, entries: Vec::new() }
    }

    pub(crate) fn offer(&mut self, c: TopCheckpoint) {
        self.entries.push(c);
        self.entries
            .sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(a.epoch.cmp(&b.epoch)));
        self.entries.truncate(self.k);
    }

    pub(crate) fn entries(&self) -> &[TopCheckpoint] {
        &self.entries
    }
}

// ── loop ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_eer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointStat {
    pub epoch: usize,
    pub dev_eer: f64,
    pub dev_loss: f64,
    pub eval_eer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightAverageStats {
    pub dev_eer: f64,
    pub eval_eer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub best_epoch: usize,
    pub class_weights: Vec<f64>,
    /// The k best checkpoints by dev EER, best first.
    pub top_checkpoints: Vec<CheckpointStat>,
    /// Mean of the top-k metrics (metric averaging).
    pub topk_mean_dev_eer: f64,
    pub topk_mean_eval_eer: f64,
    /// Metrics of the weight-averaged top-k model, when enabled.
    pub weight_average: Option<WeightAverageStats>,
}

/// Inverse-frequency class weights, normalized so a balanced dataset gets
/// weight 1 for both classes.
pub fn class_weights(train: &DatasetSplit) -> Result<Vec<f64>> {
    let mut counts = [0usize; 2];
    for r in &train.records {
        let label = r
            .label
            .ok_or_else(|| Error::Input(format!("unlabeled training utterance '{}'", r.id)))?;
        counts[label.class_index()] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Config(format!(
            "training split needs both classes (bonafide: {}, spoof: {})",
            counts[0], counts[1]
        )));
    }
    let n = (counts[0] + counts[1]) as f64;
    Ok(vec![n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

/// Stack records [B,T,D]; all records must share one shape.
fn stack_features(split: &DatasetSplit, idx: &[usize]) -> Result<Tensor> {
    let first = split.records[idx[0]].features.shape().to_vec();
    let (t, d) = (first[0], first[1]);
    let mut data = Vec::with_capacity(idx.len() * t * d);
    for &i in idx {
        let f = &split.records[i].features;
        if f.shape() != [t, d] {
            return Err(Error::Dim(format!(
                "utterance '{}' has shape {:?}, batch expects {:?}",
                split.records[i].id,
                f.shape(),
                [t, d]
            )));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![idx.len(), t, d], data)
}

/// Score every record of a split in eval mode (batched).
pub fn score_split(
    model: &KanformerModel,
    store: &mut ParamStore,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(split.records.len());
    let idx: Vec<usize> = (0..split.records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = stack_features(split, chunk)?;
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let (_, scores) = model.classify(store, &mut tape, xid, &mut Mode::Eval)?;
        for (&i, s) in chunk.iter().zip(scores) {
            out.push((split.records[i].id.clone(), s));
        }
    }
    Ok(out)
}

/// Mean weighted cross-entropy of a split in eval mode.
pub fn split_loss(
    model: &KanformerModel,
    store: &mut ParamStore,
    split: &DatasetSplit,
    weights: &[f64],
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..split.records.len()).collect();
    let mut total = 0.0;
    let mut denom = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = stack_features(split, chunk)?;
        let targets: Vec<usize> = chunk
            .iter()
            .map(|&i| split.records[i].label.expect("labeled").class_index())
            .collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let logits = model.logits(store, &mut tape, xid, &mut Mode::Eval)?;
        let loss = tape.weighted_cross_entropy(logits, &targets, weights)?;
        let w: f64 = targets.iter().map(|&y| weights[y]).sum();
        total += tape.value(loss).item()? * w;
        denom += w;
    }
    Ok(total / denom)
}

fn split_eer(
    model: &KanformerModel,
    store: &mut ParamStore,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<f64> {
    let scores = score_split(model, store, split, batch_size)?;
    let mut set = ScoreSet::default();
    for ((id, score), r) in scores.iter().zip(&split.records) {
        debug_assert_eq!(id, &r.id);
        set.push(id, *score, r.label.expect("labeled"));
    }
    Ok(compute_eer(&set)?.0)
}

/// Run the full training protocol. On return the store holds the best
/// (top-1 by dev EER) checkpoint.
pub fn train_loop(
    model: &KanformerModel,
    store: &mut ParamStore,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    eval: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainReport, Vec<TopCheckpoint>)> {
    cfg.validate()?;
    if train.records.is_empty() || dev.records.is_empty() || eval.records.is_empty() {
        return Err(Error::Config(
            "train, dev, and eval splits must all be non-empty".into(),
        ));
    }
    let weights = class_weights(train)?;
    model.fit_input_normalization(store, train)?;
    // curvature masks for the coefficient-smoothness penalty
    let kan_penalty: Vec<(crate::params::ParamId, Tensor)> = if cfg.kan_smoothing > 0.0 {
        store
            .iter()
            .filter(|(_, p)| {
                p.trainable
                    && (p.name.ends_with("cheby_coeffs") || p.name.ends_with("kanconv_coeffs"))
            })
            .map(|(id, p)| {
                let shape = p.value.shape().to_vec();
                let j = *shape.last().expect("coefficient tensors are ranked");
                let scale = cfg.kan_smoothing / p.value.numel() as f64;
                let mask = Tensor::from_fn(&shape, |i| {
                    let deg = i % j;
                    if deg >= 2 { scale * (deg * deg) as f64 } else { 0.0 }
                });
                (id, mask)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(store);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut tracker = TopKTracker::new(cfg.top_k);
    let mut epochs = Vec::new();
    let mut early_stopped = false;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        stopped_epoch = epoch;
        let mut order: Vec<usize> = (0..train.records.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack_features(train, chunk)?;
            let targets: Vec<usize> = chunk
                .iter()
                .map(|&i| train.records[i].label.expect("labeled").class_index())
                .collect();
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let logits = model.logits(store, &mut tape, xid, &mut Mode::Train { rng: &mut rng })?;
            let ce = tape.weighted_cross_entropy(logits, &targets, &weights)?;
            let mut loss = ce;
            for (pid, mask) in &kan_penalty {
                let p = tape.param(store, *pid);
                let sq = tape.mul(p, p)?;
                let m = tape.leaf(mask.clone());
                let weighted = tape.mul(sq, m)?;
                let s = tape.sum(weighted);
                loss = tape.add(loss, s)?;
            }
            epoch_loss += tape.value(ce).item()?;
            batches += 1.0;
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, store);
            adam_step(store, &mut adam, cfg)?;
            store.zero_grads();
        }
        let train_loss = epoch_loss / batches;
        let dev_loss = split_loss(model, store, dev, &weights, cfg.batch_size)?;
        let dev_eer = split_eer(model, store, dev, cfg.batch_size)?;
        let stats = EpochStats { epoch, train_loss, dev_loss, dev_eer };
        on_epoch(&stats);
        epochs.push(stats);
        tracker.offer(TopCheckpoint {
            epoch,
            dev_eer,
            dev_loss,
            snapshot: store.snapshot(),
        });
        if stopper.observe(dev_loss) {
            early_stopped = true;
            break;
        }
    }

    // eval metrics per retained checkpoint
    let mut top_stats = Vec::new();
    for c in tracker.entries() {
        store.restore(&c.snapshot)?;
        let eval_eer = split_eer(model, store, eval, cfg.batch_size)?;
        top_stats.push(CheckpointStat {
            epoch: c.epoch,
            dev_eer: c.dev_eer,
            dev_loss: c.dev_loss,
            eval_eer,
        });
    }
    let kf = top_stats.len() as f64;
    let topk_mean_dev_eer = top_stats.iter().map(|c| c.dev_eer).sum::<f64>() / kf;
    let topk_mean_eval_eer = top_stats.iter().map(|c| c.eval_eer).sum::<f64>() / kf;

    let weight_average = if cfg.average_weights {
        let n = tracker.entries()[0].snapshot.len();
        let mut avg = vec![0.0; n];
        for c in tracker.entries() {
            for (a, &s) in avg.iter_mut().zip(&c.snapshot) {
                *a += s / kf;
            }
        }
        store.restore(&avg)?;
        Some(WeightAverageStats {
            dev_eer: split_eer(model, store, dev, cfg.batch_size)?,
            eval_eer: split_eer(model, store, eval, cfg.batch_size)?,
        })
    } else {
        None
    };

    // leave the best checkpoint in the store
    store.restore(&tracker.entries()[0].snapshot)?;
    let report = TrainReport {
        epochs,
        stopped_epoch,
        early_stopped,
        best_epoch: tracker.entries()[0].epoch,
        class_weights: weights,
        top_checkpoints: top_stats,
        topk_mean_dev_eer,
        topk_mean_eval_eer,
        weight_average,
    };
    Ok((report, tracker.entries().to_vec()))
}

// ── checkpoints ──────────────────────────────────────────────────────

const KFCK_MAGIC: &[u8; 4] = b"KFCK";
const KFCK_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &[u8; 32]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(KFCK_MAGIC);
    buf.extend_from_slice(&KFCK_VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash);
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Restore parameter values in place. The checkpoint must carry the
/// expected config hash and exactly the store's parameters.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, expected_hash: &[u8; 32]) -> Result<()> {
    let fmt = |offset: u64, msg: String| Error::Format {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let take = |off: usize, n: usize| -> Result<&[u8]> {
        buf.get(off..off + n)
            .ok_or_else(|| fmt(buf.len() as u64, format!("truncated: need {n} bytes at {off}")))
    };
    if take(0, 4)? != KFCK_MAGIC {
        return Err(fmt(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != KFCK_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, supported {KFCK_VERSION}"
        )));
    }
    let hash = take(8, 32)?;
    if hash != expected_hash {
        return Err(Error::Incompatible(
            "config hash mismatch: checkpoint was written for a different model configuration"
                .into(),
        ));
    }
    let mut off = 40;
    let mut loaded: Vec<(String, Tensor)> = Vec::new();
    while off < buf.len() {
        let name_len = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
        off += 4;
        let name = String::from_utf8(take(off, name_len)?.to_vec())
            .map_err(|_| fmt(off as u64, "parameter name is not UTF-8".into()))?;
        off += name_len;
        let ndim = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
        off += 4;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f64::from_le_bytes(take(off + 8 * i, 8)?.try_into().unwrap()));
        }
        off += 8 * n;
        loaded.push((name, Tensor::new(shape, data)?));
    }
    if loaded.len() != store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for ((name, tensor), (_, p)) in loaded.into_iter().zip(store.iter_mut()) {
        if name != p.name || tensor.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!(
                "checkpoint entry '{name}' {:?} does not match parameter '{}' {:?}",
                tensor.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, split_records, SyntheticGenConfig};
    use crate::model::{build_model, ModelConfig};
    use crate::params::ParamStore;
    use rand::Rng;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_identity() {
        let mut s = store_with(&[1.0, -2.0, 3.0]);
        let mut state = AdamState::new(&s);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adam_step(&mut s, &mut state, &cfg).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).value.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_zero_learning_rate_is_identity() {
        // lr = 0 must freeze parameters regardless of gradients; bypass the
        // lr > 0 validation since this checks the arithmetic itself
        let mut s = store_with(&[1.0, -2.0]);
        s.get_mut(crate::params::ParamId(0))
            .grad
            .data_mut()
            .copy_from_slice(&[5.0, -7.0]);
        let mut state = AdamState::new(&s);
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        adam_step(&mut s, &mut state, &cfg).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut s = store_with(&[0.0, 0.0]);
        s.get_mut(crate::params::ParamId(0))
            .grad
            .data_mut()
            .copy_from_slice(&[0.37, -1100.0]);
        let mut state = AdamState::new(&s);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adam_step(&mut s, &mut state, &cfg).unwrap();
        let v = s.get(crate::params::ParamId(0)).value.data();
        // bias-corrected first step: lr·g/(|g| + eps) = ±lr (up to eps)
        assert!((v[0] + cfg.learning_rate).abs() < 1e-6);
        assert!((v[1] - cfg.learning_rate).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut s = store_with(&[3.0, -2.0, 1.5]);
        let mut state = AdamState::new(&s);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for _ in 0..200 {
            // f = ||p||², grad = 2p
            let g: Vec<f64> = s
                .get(crate::params::ParamId(0))
                .value
                .data()
                .iter()
                .map(|v| 2.0 * v)
                .collect();
            s.get_mut(crate::params::ParamId(0))
                .grad
                .data_mut()
                .copy_from_slice(&g);
            adam_step(&mut s, &mut state, &cfg).unwrap();
            s.zero_grads();
        }
        let norm: f64 = s
            .get(crate::params::ParamId(0))
            .value
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "norm after 200 steps: {norm}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients_naming_the_parameter() {
        let mut s = ParamStore::new();
        s.add("healthy", Tensor::zeros(&[2])).unwrap();
        let bad = s.add("exploded", Tensor::zeros(&[2])).unwrap();
        s.get_mut(bad).grad.data_mut()[1] = f64::NAN;
        let mut state = AdamState::new(&s);
        let err = adam_step(&mut s, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("exploded"), "{err}");
    }

    #[test]
    fn early_stopper_fires_after_patience_non_improvements() {
        let mut stop = EarlyStopper::new(7);
        assert!(!stop.observe(1.0)); // epoch 1 sets the best
        for epoch in 2..=7 {
            assert!(!stop.observe(1.0 + epoch as f64), "epoch {epoch}");
        }
        assert!(stop.observe(100.0)); // 7th consecutive non-improvement
    }

    #[test]
    fn early_stopper_resets_on_improvement() {
        let mut stop = EarlyStopper::new(2);
        assert!(!stop.observe(1.0));
        assert!(!stop.observe(2.0));
        assert!(!stop.observe(0.5)); // improvement resets
        assert!(!stop.observe(0.9));
        assert!(stop.observe(0.9));
    }

    #[test]
    fn topk_tracker_matches_bruteforce_resort() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut tracker = TopKTracker::new(5);
        let mut history = Vec::new();
        for epoch in 1..=40 {
            let dev_eer = rng.random_range(0.0..1.0);
            let c = TopCheckpoint {
                epoch,
                dev_eer,
                dev_loss: 0.0,
                snapshot: vec![epoch as f64],
            };
            history.push(c.clone());
            tracker.offer(c);

            let mut sorted = history.clone();
            sorted.sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(a.epoch.cmp(&b.epoch)));
            sorted.truncate(5);
            let got: Vec<usize> = tracker.entries().iter().map(|c| c.epoch).collect();
            let expect: Vec<usize> = sorted.iter().map(|c| c.epoch).collect();
            assert_eq!(got, expect, "epoch {epoch}");
        }
    }

    #[test]
    fn balanced_class_weights_are_unit() {
        let cfg = SyntheticGenConfig {
            n_per_class: 4,
            t_frames: 6,
            feature_dim: 3,
            seed: 1,
        };
        let split = DatasetSplit::new(synth_generate(&cfg), crate::data::Role::Train);
        let w = class_weights(&split).unwrap();
        assert!((w[0] - 1.0).abs() <= 1e-12 && (w[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weighted_ce_on_balanced_batch_equals_unweighted() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = tape.leaf(Tensor::from_fn(&[4, 2], |_| rng.random_range(-2.0..2.0)));
        let targets = [0, 1, 0, 1];
        let a = tape
            .weighted_cross_entropy(logits, &targets, &[1.0, 1.0])
            .unwrap();
        // inverse-frequency weights on a balanced batch are exactly 1
        let w = vec![4.0 / (2.0 * 2.0), 4.0 / (2.0 * 2.0)];
        let b = tape.weighted_cross_entropy(logits, &targets, &w).unwrap();
        let (av, bv) = (tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
        assert!((av - bv).abs() <= 1e-12);
    }

    fn tiny_task() -> (ModelConfig, SyntheticGenConfig) {
        (
            ModelConfig {
                feature_dim: 6,
                model_dim: 8,
                heads: 2,
                blocks: 1,
                cheby_degree: 2,
                depthwise_kernel: 3,
                kan_projection: true,
                kan_feedforward: true,
                kan_convolution: true,
                dropout: 0.0,
            },
            SyntheticGenConfig {
                n_per_class: 20,
                t_frames: 20,
                feature_dim: 6,
                seed: 5,
            },
        )
    }

    #[test]
    fn first_batch_loss_decreases_over_twenty_steps() {
        let (mcfg, dcfg) = tiny_task();
        let (model, mut store) = build_model(&mcfg, 42).unwrap();
        let (mut train, _, _) = split_records(synth_generate(&dcfg), 42);
        train.prepare(20).unwrap();
        let weights = class_weights(&train).unwrap();
        let cfg = TrainConfig::default();
        let idx: Vec<usize> = (0..cfg.batch_size.min(train.records.len())).collect();
        let targets: Vec<usize> = idx
            .iter()
            .map(|&i| train.records[i].label.unwrap().class_index())
            .collect();
        let x = stack_features(&train, &idx).unwrap();
        let mut adam = AdamState::new(&store);
        let mut losses = Vec::new();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits = model
                .logits(&mut store, &mut tape, xid, &mut Mode::Train { rng: &mut rng })
                .unwrap();
            let loss = tape.weighted_cross_entropy(logits, &targets, &weights).unwrap();
            losses.push(tape.value(loss).item().unwrap());
            let grads = tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&grads, &mut store);
            adam_step(&mut store, &mut adam, &cfg).unwrap();
            store.zero_grads();
        }
        assert!(
            losses[19] < losses[0],
            "loss did not decrease: {} -> {}",
            losses[0],
            losses[19]
        );
    }

    #[test]
    fn train_loop_is_deterministic_and_reports_every_epoch() {
        let (mcfg, dcfg) = tiny_task();
        let run = || {
            let (model, mut store) = build_model(&mcfg, 7).unwrap();
            let (mut train, mut dev, mut eval) = split_records(synth_generate(&dcfg), 7);
            for s in [&mut train, &mut dev, &mut eval] {
                s.prepare(20).unwrap();
            }
            let cfg = TrainConfig {
                max_epochs: 3,
                top_k: 2,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let (report, _) = train_loop(&model, &mut store, &train, &dev, &eval, &cfg, 7, |_| {}).unwrap();
            (serde_json::to_string(&report).unwrap(), store.snapshot())
        };
        let (r1, s1) = run();
        let (r2, s2) = run();
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
        let report: TrainReport = serde_json::from_str(&r1).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.stopped_epoch, 3);
        assert!(!report.early_stopped);
        assert_eq!(report.top_checkpoints.len(), 2);
    }

    #[test]
    fn single_epoch_run_reports_one_checkpoint() {
        let (mcfg, dcfg) = tiny_task();
        let (model, mut store) = build_model(&mcfg, 9).unwrap();
        let (mut train, mut dev, mut eval) = split_records(synth_generate(&dcfg), 9);
        for s in [&mut train, &mut dev, &mut eval] {
            s.prepare(20).unwrap();
        }
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (report, checkpoints) =
            train_loop(&model, &mut store, &train, &dev, &eval, &cfg, 9, |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(checkpoints.len(), 1);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (mcfg, _) = tiny_task();
        let (model, mut store) = build_model(&mcfg, 11).unwrap();
        let hash = mcfg.hash();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.kfck");
        let p2 = dir.path().join("b.kfck");

        save_checkpoint(&p1, &store, &hash).unwrap();
        // score before and after a load round trip
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[1, 5, 6], |_| rng.random_range(-1.0..1.0));
        let score = |store: &mut ParamStore| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            model.classify(store, &mut tape, xid, &mut Mode::Eval).unwrap().1[0]
        };
        let before = score(&mut store);
        // perturb, then restore from the file
        let first = store.iter().next().unwrap().0;
        store.get_mut(first).value.data_mut()[0] += 1.0;
        load_checkpoint(&p1, &mut store, &hash).unwrap();
        assert_eq!(score(&mut store), before);

        // save→load→save byte-identical
        save_checkpoint(&p2, &store, &hash).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // mismatched architecture: different config hash
        let other = ModelConfig { model_dim: 16, ..mcfg.clone() };
        assert!(matches!(
            load_checkpoint(&p1, &mut store, &other.hash()),
            Err(Error::Incompatible(_))
        ));

        // truncation
        let bytes = std::fs::read(&p1).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&p2, &mut store, &hash),
            Err(Error::Format { .. })
        ));
    }
}
