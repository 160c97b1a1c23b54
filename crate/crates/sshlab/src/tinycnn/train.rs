//! SGD with momentum, weight decay, and early stopping on validation loss.

use serde::{Deserialize, Serialize};

use super::{evaluate, CnnModel, Params};
use crate::error::{Result, SshError};
use crate::rng::{mix3, shuffle};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many consecutive epochs of validation-loss rise.
    pub patience: usize,
    /// No early stopping before this epoch.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.1,
            weight_decay: 0.1,
            batch_size: 64,
            max_epochs: 500,
            patience: 10,
            warmup_epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters from the best-validation-loss epoch.
    pub model: CnnModel,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    out
}

/// Train `model` on `train_set`, tracking `val_set` for early stopping.
///
/// Batch order is a seeded shuffle per epoch; within-batch gradient
/// accumulation runs in fixed sample order, so the result is bit-identical
/// across runs and thread counts.
pub fn train(
    model: CnnModel,
    train_set: &[(Vec<f64>, u8)],
    val_set: &[(Vec<f64>, u8)],
    config: &TrainConfig,
) -> Result<TrainingOutcome> {
    if config.max_epochs == 0 {
        return Ok(TrainingOutcome {
            model,
            history: vec![],
            stopped_early: false,
        });
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(SshError::Policy("empty training or validation set".into()));
    }

    let mut model = model;
    let mut momentum_buf = Params::zeros(&model.arch);
    let mut history = Vec::new();
    let mut best: Option<(f64, Params)> = None;
    let mut prev_val_loss = f64::INFINITY;
    let mut rise_streak = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut order, mix3(config.seed, 0x5347_4400, epoch as u64));

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], u8)> = chunk
                .iter()
                .map(|&i| (train_set[i].0.as_slice(), train_set[i].1))
                .collect();
            let (loss, grads, correct) =
                super::loss_and_grads_counted(&model, &batch, config.weight_decay)?;
            if !loss.is_finite() {
                return Err(SshError::Diverged(epoch));
            }
            epoch_loss += loss * chunk.len() as f64;
            epoch_correct += correct;

            momentum_buf.zip_mut(&grads, |b, g| *b = config.momentum * *b + g);
            model
                .params
                .zip_mut(&momentum_buf, |w, b| *w -= config.lr * b);
        }
        // Running statistics of the epoch: each batch is scored with the
        // parameters in effect when it was visited.
        let train_loss = epoch_loss / train_set.len() as f64;
        let train_acc = epoch_correct as f64 / train_set.len() as f64;

        let (val_loss, val_acc) = evaluate(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(SshError::Diverged(epoch));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });

        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }
        if val_loss > prev_val_loss {
            rise_streak += 1;
        } else {
            rise_streak = 0;
        }
        prev_val_loss = val_loss;
        if rise_streak >= config.patience && epoch + 1 > config.warmup_epochs {
            stopped_early = true;
            break;
        }
    }

    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainingOutcome {
        model,
        history,
        stopped_early,
    })
}
