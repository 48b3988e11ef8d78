//! Supervised source training, used to produce the checkpoint that
//! test-time adaptation starts from.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{NormMode, NormPoolClassifier};
use crate::augment::FeatureGrid;
use crate::error::{param, Error, Result};
use crate::eval::ConfusionMatrix;
use crate::numerics::softmax_slice;
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Running-statistics momentum.
    pub momentum: f64,
    /// Share of the data held out for the reported validation F1.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.1,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub val_macro_f1: f64,
    pub n_train: usize,
    pub n_val: usize,
}

fn cross_entropy_grads(logits: &[crate::numerics::LogitVector], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let lse = crate::numerics::log_sum_exp(z);
            loss += lse - z.as_slice()[y];
            let mut g = softmax_slice(z.as_slice(), 1.0);
            g[y] -= 1.0;
            g.iter_mut().for_each(|v| *v /= n);
            g
        })
        .collect();
    (loss / n, grads)
}

fn evaluate(model: &NormPoolClassifier, data: &[&(FeatureGrid, usize)]) -> Result<ConfusionMatrix> {
    let classes = model.dims().classes;
    let grids: Vec<FeatureGrid> = data.iter().map(|(x, _)| x.clone()).collect();
    let preds: Vec<usize> = model.predict(&grids)?.iter().map(|z| z.argmax()).collect();
    let labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    ConfusionMatrix::from_predictions(&labels, &preds, classes)
}

/// Mini-batch SGD on cross-entropy over all parameters, normalizing with
/// batch statistics and tracking running statistics with `momentum`.
pub fn pretrain(
    model: &mut NormPoolClassifier,
    data: &[(FeatureGrid, usize)],
    config: &PretrainConfig,
) -> Result<TrainLog> {
    let classes = model.dims().classes;
    if config.batch_size == 0 {
        return Err(param("batch_size", "must be >= 1"));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(param("val_fraction", "must lie in [0, 1)"));
    }
    let mut counts = vec![0usize; classes];
    for (_, y) in data {
        if *y >= classes {
            return Err(Error::Degenerate(format!("label {y} out of range for {classes} classes")));
        }
        counts[*y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!(
            "class {missing} has no training samples"
        )));
    }

    let root = SeedStream::new(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut root.derive_named("split").rng());
    let n_val = (data.len() as f64 * config.val_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut root.derive_named("epoch").derive(epoch as u64).rng());
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            let grids: Vec<FeatureGrid> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let (logits, cache) = model.forward(&grids, &NormMode::BatchStats)?;
            let (loss, d_logits) = cross_entropy_grads(&logits, &labels);
            let grads = model.backward_full(&cache, &d_logits)?;
            let stats = cache.stats().clone();
            model.apply_full_step(&grads, config.lr)?;
            model.blend_running_stats(&stats, config.momentum);
            total += loss;
            batches += 1;
        }
        epoch_loss.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }

    let train_refs: Vec<&(FeatureGrid, usize)> = train_idx.iter().map(|&i| &data[i]).collect();
    let val_refs: Vec<&(FeatureGrid, usize)> = val_idx.iter().map(|&i| &data[i]).collect();
    let train_cm = evaluate(model, &train_refs)?;
    let val_cm = if val_refs.is_empty() {
        train_cm.clone()
    } else {
        evaluate(model, &val_refs)?
    };
    Ok(TrainLog {
        epoch_loss,
        train_accuracy: train_cm.accuracy(),
        val_macro_f1: val_cm.f1_scores()?.macro_f1,
        n_train: train_idx.len(),
        n_val,
    })
}
