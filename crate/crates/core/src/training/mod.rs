//! Masked training: every example sees a freshly drawn coalition of feature
//! groups each epoch, the loss is the MSE over the horizon, and the weights
//! with the best full-input validation loss are kept.

mod optimizer;
#[cfg(test)]
mod tests;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optimizer::{clip_global_norm, Adam, AdamConfig, OptimizerKind};

use crate::error::{Error, Result};
use crate::model::{write_atomic, Layout, ModelParams};
use crate::numkernel::{Exec, Tape, Tensor};
use crate::schema::{ForecastExample, GroupMask};
use crate::seeds::derive_rng;

/// Examples whose gradients are summed sequentially before chunks are combined.
/// Fixed so the reduction order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Random coalitions during training; the model can be explained exactly.
    Masked,
    /// Always the full input: a plain Transformer.
    Unmasked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Probability that a group is masked.
    pub mask_p: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-5,
            decay: 1.0,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            mask_p: 0.5,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return Err(Error::invalid("mask probability must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            kind: self.optimizer,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Coalition over `n` groups where each group is independently masked with
/// probability `p`.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> GroupMask {
    let mut m = GroupMask::empty(n);
    for g in 0..n {
        if !rng.random_bool(p) {
            m = m.with(g);
        }
    }
    m
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Masked groups summed over every training example of the epoch.
    pub masked_groups: u64,
}

impl EpochLog {
    pub fn to_json_lines(log: &[EpochLog]) -> Result<String> {
        let mut s = String::new();
        for e in log {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped {
        epoch: usize,
    },
    /// A non-finite loss or weight appeared; the best finite weights are kept.
    Diverged {
        epoch: usize,
    },
}

/// Everything needed to continue training after `next_epoch - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub next_epoch: usize,
    pub current: Vec<Vec<f32>>,
    pub best: Vec<Vec<f32>>,
    pub best_val: f64,
    pub wait: usize,
    pub optimizer: Adam,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let current: Vec<Vec<f32>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
        let sizes: Vec<usize> = current.iter().map(Vec::len).collect();
        Self {
            next_epoch: 0,
            best: current.clone(),
            current,
            best_val: f64::INFINITY,
            wait: 0,
            optimizer: Adam::new(config.adam(), &sizes),
            log: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub state: TrainState,
}

fn load_into(template: &ModelParams, data: &[Vec<f32>]) -> Result<ModelParams> {
    let mut p = template.clone();
    if data.len() != p.tensors().len() {
        return Err(Error::invalid("saved weights do not match the model layout"));
    }
    for (t, d) in p.tensors_mut().iter_mut().zip(data) {
        if t.len() != d.len() {
            return Err(Error::invalid("saved weights do not match the model layout"));
        }
        *t = Arc::new(Tensor::new(t.shape().to_vec(), d.clone())?);
    }
    Ok(p)
}

fn copy_into(params: &mut ModelParams, data: &[Vec<f32>]) {
    for (t, d) in params.tensors_mut().iter_mut().zip(data) {
        Arc::make_mut(t).data_mut().copy_from_slice(d);
    }
}

/// Mean squared error of one forecast against its target.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / target.len().max(1) as f64
}

/// Mean per-example MSE of `params` on `examples` with every group present.
pub fn full_mask_loss(params: &ModelParams, examples: &[ForecastExample]) -> Result<f64> {
    mean_loss(params, examples, |_| GroupMask::full(params.schema().n_groups()))
}

/// Mean per-example MSE with example `i` seeing `mask(i)`.
pub fn mean_loss(
    params: &ModelParams,
    examples: &[ForecastExample],
    mask: impl Fn(usize) -> GroupMask + Sync,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| Ok(mse(&params.forward_pruned(ex, mask(i))?, &ex.future_target)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

struct ExampleGrad {
    loss: f64,
    grads: Vec<Option<Tensor>>,
}

fn example_grad(
    params: &ModelParams,
    ex: &ForecastExample,
    mask: GroupMask,
    dropout_rng: rand_chacha::ChaCha8Rng,
) -> Result<ExampleGrad> {
    let mut tape = Tape::new().with_dropout(params.config().dropout, dropout_rng);
    let y = params.forward_with(&mut tape, ex, mask, Layout::Pruned)?;
    let target: Vec<f32> = ex.future_target.iter().map(|&v| v as f32).collect();
    let loss = tape.mse(y, target)?;
    let value = tape.value(&loss).data()[0] as f64;
    let mut g = tape.backward(loss);
    let grads = (0..params.tensors().len())
        .map(|id| tape.param_var(id).and_then(|v| g.take(v)))
        .collect();
    Ok(ExampleGrad { loss: value, grads })
}

fn accumulate(acc: &mut [Vec<f32>], grads: &[Option<Tensor>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            for (x, y) in a.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
}

/// Trains from freshly initialised `params`.
pub fn train(
    train_set: &[ForecastExample],
    val_set: &[ForecastExample],
    params: &ModelParams,
    config: &TrainConfig,
    flavor: Flavor,
) -> Result<TrainOutcome> {
    let state = TrainState::new(params, config);
    resume(train_set, val_set, params, state, config, flavor)
}

/// Continues training from `state`; `template` supplies the configuration
/// and schema. Epoch `e` always draws the same shuffles, masks and dropout
/// for a given seed, so a resumed run matches an uninterrupted one.
pub fn resume(
    train_set: &[ForecastExample],
    val_set: &[ForecastExample],
    template: &ModelParams,
    mut state: TrainState,
    config: &TrainConfig,
    flavor: Flavor,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    for ex in train_set.iter().chain(val_set) {
        ex.validate(template.schema())?;
    }
    let n_groups = template.schema().n_groups();
    let mut params = load_into(template, &state.current)?;
    if state.next_epoch == 0 && state.best_val.is_infinite() {
        state.best_val = full_mask_loss(&params, val_set)?;
        state.best = state.current.clone();
    }
    let sizes: Vec<usize> = state.current.iter().map(Vec::len).collect();
    let mut stop = StopReason::MaxEpochs;

    for epoch in state.next_epoch..config.max_epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, &[0, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut masked_groups = 0u64;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let masks: Vec<GroupMask> = batch
                .iter()
                .map(|&i| match flavor {
                    Flavor::Masked => sample_mask(
                        &mut derive_rng(config.seed, &[1, epoch as u64, i as u64]),
                        n_groups,
                        config.mask_p,
                    ),
                    Flavor::Unmasked => GroupMask::full(n_groups),
                })
                .collect();
            masked_groups += masks.iter().map(|m| (n_groups - m.count()) as u64).sum::<u64>();
            let chunks: Vec<(f64, Vec<Vec<f32>>)> = batch
                .par_chunks(GRAD_CHUNK)
                .zip(masks.par_chunks(GRAD_CHUNK))
                .map(|(idx, ms)| {
                    let mut acc: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                    let mut loss = 0.0;
                    for (&i, &m) in idx.iter().zip(ms) {
                        let rng = derive_rng(config.seed, &[2, epoch as u64, i as u64]);
                        let eg = example_grad(&params, &train_set[i], m, rng)?;
                        loss += eg.loss;
                        accumulate(&mut acc, &eg.grads);
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<_>>()
                .or_else(|e: Error| if e.is_numerical() { Ok(Vec::new()) } else { Err(e) })?;
            if chunks.is_empty() {
                diverged = true;
                break;
            }
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (loss, acc) in &chunks {
                loss_sum += loss;
                for (g, a) in grads.iter_mut().zip(acc) {
                    for (x, y) in g.iter_mut().zip(a) {
                        *x += y;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            if let Some(c) = config.clip_norm {
                if !clip_global_norm(&mut grads, c).is_finite() {
                    diverged = true;
                    break;
                }
            }
            let mut views: Vec<&mut [f32]> = state.current.iter_mut().map(Vec::as_mut_slice).collect();
            let gviews: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            state.optimizer.step(&mut views, &gviews, lr)?;
            copy_into(&mut params, &state.current);
        }
        let val_loss = if diverged {
            f64::NAN
        } else {
            match full_mask_loss(&params, val_set) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        if diverged || !val_loss.is_finite() {
            stop = StopReason::Diverged { epoch };
            break;
        }
        state.log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            masked_groups,
        });
        state.next_epoch = epoch + 1;
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best = state.current.clone();
            state.wait = 0;
        } else {
            state.wait += 1;
            if state.wait >= config.patience {
                stop = StopReason::EarlyStopped { epoch };
                break;
            }
        }
    }
    let best = load_into(template, &state.best)?;
    Ok(TrainOutcome {
        params: best,
        log: state.log.clone(),
        stop,
        state,
    })
}
