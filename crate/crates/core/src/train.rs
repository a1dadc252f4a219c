//! Minibatch SGD with momentum and weight decay, shared by expert training,
//! score computation and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::augment::{self, AugPolicy};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nets::{self, Mode, NetSpec};
use crate::tensor::Tensor;
use crate::util::rng_for;

/// Stream tags so that batch order and augmentation never share a generator.
const SHUFFLE_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// One 10x decay at half the epochs.
    StepHalf,
    /// Cosine decay to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, step: usize, total_steps: usize, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepHalf => {
                if epoch >= total_epochs / 2 {
                    base * 0.1
                } else {
                    base
                }
            }
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub aug: AugPolicy,
    #[serde(default)]
    pub seed: u64,
}

/// Optimizer state at an epoch boundary; enough to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: Tensor,
    pub momentum: Tensor,
}

impl TrainState {
    pub fn fresh(params: Tensor) -> Self {
        let momentum = Tensor::zeros(params.shape());
        TrainState {
            epoch: 0,
            params,
            momentum,
        }
    }
}

/// Batches per epoch: full batches only, except that a set smaller than one
/// batch is used whole.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n / batch_size.min(n)).max(1)
    }
}

/// Loss, parameter gradient and logits on one batch with batch statistics.
pub fn batch_gradient(spec: &NetSpec, params: &Tensor, images: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let theta = tape.leaf(params.clone());
    let x = Var::constant(images.clone());
    let out = nets::forward(&tape, spec, &theta, &x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(&out.logits, labels)?;
    let g = tape.grad(&loss, &[&theta])?.remove(0);
    Ok((loss.item(), g, out.logits.value().clone()))
}

/// Runs epochs `state.epoch..cfg.epochs`, calling `on_epoch` after each
/// epoch with the updated state. `frozen` routes rows under combined
/// augmentation.
pub fn train(
    spec: &NetSpec,
    set: &LabeledSet,
    frozen: Option<&[bool]>,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<TrainState> {
    let n = set.len();
    if n == 0 {
        return Err(Error::Invalid("cannot train on an empty set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let bs = cfg.batch_size.min(n);
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        let mut aug_rng = rng_for(cfg.seed, AUG_STREAM, epoch as u64);
        let mut loss_sum = 0.0;
        for b in 0..per_epoch {
            let idx = &order[b * bs..(b + 1) * bs];
            let images = set.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let flags: Option<Vec<bool>> = frozen.map(|f| idx.iter().map(|&i| f[i]).collect());
            let images = augment::apply_tensor(&cfg.aug, &images, flags.as_deref(), &mut aug_rng)?;
            let (loss, g, _) = batch_gradient(spec, &state.params, &images, &labels).map_err(|e| match e {
                Error::NonFinite { op } => Error::Invalid(format!("training diverged in epoch {epoch} ({op})")),
                other => other,
            })?;
            loss_sum += loss;
            let lr = cfg.schedule.lr(cfg.lr, epoch * per_epoch + b, total_steps, epoch, cfg.epochs);
            let p = state.params.data_mut();
            let m = state.momentum.data_mut();
            for ((pi, mi), gi) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                let d = gi + cfg.weight_decay * *pi;
                *mi = cfg.momentum * *mi + d;
                *pi -= lr * *mi;
            }
            if !state.params.is_finite() {
                return Err(Error::NonFinite { op: "sgd update" });
            }
        }
        state.epoch += 1;
        on_epoch(&state, loss_sum / per_epoch as f64)?;
    }
    Ok(state)
}

/// Per-sample correctness and logits of `params` over a whole set, with
/// normalization statistics calibrated on that same set.
pub fn predict(spec: &NetSpec, params: &Tensor, set: &LabeledSet) -> Result<Tensor> {
    let stats = nets::calibrate_norm_stats(spec, params, &set.images)?;
    let (logits, _) = nets::infer(spec, params, &stats, &set.images, 256)?;
    Ok(logits)
}

pub fn correctness(logits: &Tensor, labels: &[usize]) -> Vec<bool> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| nets::argmax(logits.row(i)) == y)
        .collect()
}
