//! Teacher-forced training with Adam and per-epoch evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::error::{HocaError, Result};
use crate::rng::stream;

use super::data::{Item, BOS};
use super::model::{Captioner, DecoderState, InferenceParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Items per Adam step; gradients are summed over the batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed for shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token loss over the epoch's forward passes.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_token_acc: f64,
}

/// Teacher-forced per-token loss and argmax accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub token_acc: f64,
    pub tokens: usize,
}

/// Evaluates with teacher forcing. Ties in the argmax go to the lowest id.
pub fn evaluate(params: &InferenceParams, items: &[&Item]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for item in items {
        let enc = params.encode(&item.features)?;
        let mut state = DecoderState::zeros(params.hidden());
        let mut prev = BOS;
        for &target in &item.caption {
            let (next, out) = params.step(&enc, &state, prev)?;
            let logits = &out.logits;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - logits[target];
            if argmax(logits) == target {
                correct += 1;
            }
            tokens += 1;
            state = next;
            prev = target;
        }
    }
    if tokens == 0 {
        return Ok(Evaluation {
            loss: f64::NAN,
            token_acc: f64::NAN,
            tokens,
        });
    }
    Ok(Evaluation {
        loss: loss / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        tokens,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place and returns one record per epoch.
pub fn train(model: &mut Captioner, train_items: &[&Item], val_items: &[&Item], config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    train_with(model, train_items, val_items, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    model: &mut Captioner,
    train_items: &[&Item],
    val_items: &[&Item],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_items.is_empty() {
        return Err(HocaError::Config("training split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(HocaError::Config("batch_size: must be positive".into()));
    }
    let mut adam = Adam::new(&model.store, config.adam);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut shuffle_rng = stream(config.seed, 0x5f);
    let mut dropout_rng = stream(config.seed, 0xd20b);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grads();
            for &idx in batch {
                let item = train_items[idx];
                let mut g = Graph::new();
                let loss = model.loss_node(&mut g, &model.store, &item.features, &item.caption, Some(&mut dropout_rng))?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(HocaError::Numeric(format!(
                        "loss is {value} at epoch {epoch}, step {}",
                        adam.steps_taken() + 1
                    )));
                }
                total += value;
                tokens += item.caption.len();
                g.backward(loss, &mut model.store)?;
            }
            adam.step(&mut model.store).map_err(|e| match e {
                HocaError::Numeric(msg) => HocaError::Numeric(format!("{msg} at epoch {epoch}, step {}", adam.steps_taken() + 1)),
                other => other,
            })?;
        }
        let val = evaluate(&model.snapshot()?, val_items)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / tokens as f64,
            val_loss: val.loss,
            val_token_acc: val.token_acc,
        };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(curve)
}
