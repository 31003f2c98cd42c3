//! Optimization: Adam, step-decay schedule, the epoch loop and evaluation.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamState};
pub use metrics::{argmax, Metrics};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Model;
use crate::rng::{self, Stream};

const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Worker threads for evaluation; results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 210,
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_interval: 50,
            seed: 0,
            shuffle: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_interval == 0 {
            return Err(Error::Config("epochs, batch size and decay interval must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }
}

/// `base · decay^floor(epoch / interval)`, with epochs counted from 0.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.decay_factor.powi((epoch / config.decay_interval) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    pub best_model: Model,
    /// Epoch (from 0) whose weights `best_model` holds.
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

fn check_classes(model: &Model, dataset: &WindowedDataset) -> Result<()> {
    let c = model.config();
    if dataset.num_classes() != c.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes(),
            c.num_classes
        )));
    }
    if dataset.axes != c.sensor_axes || dataset.width != c.window_length {
        return Err(Error::Config(format!(
            "dataset windows are {}×{}, model expects {}×{}",
            dataset.axes, dataset.width, c.sensor_axes, c.window_length
        )));
    }
    Ok(())
}

/// Trains `model` and returns both the last-epoch and best-validation models.
pub fn train(model: Model, train: &WindowedDataset, val: &WindowedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train, val, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    mut model: Model,
    train: &WindowedDataset,
    val: &WindowedDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    check_classes(&model, train)?;
    check_classes(&model, val)?;

    let mut adam = AdamState::new(model.params().tensors());
    let mut shuffle_rng = rng::stream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = train.batch(idx)?;
            let labels = train.batch_labels(idx);
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let input = g.constant(x);
            let (logits, moments) = model
                .run(&mut g, &p, input, Mode::Train, None)
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;
            let loss = g.cross_entropy(logits, &labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            let zeros: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let grad_refs: Vec<&[f64]> = p
                .vars
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| grads.get(v).unwrap_or(z))
                .collect();
            adam_step(model.params_mut().tensors_mut(), &grad_refs, &mut adam, lr)?;
            model.apply_moments(&moments);
            loss_sum += value * idx.len() as f64;
        }
        let metrics = evaluate_with_threads(&model, val, config.threads)?;
        let row = HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: metrics.loss,
            val_acc: metrics.accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} train_loss {:.5} val_loss {:.5} val_acc {:.4}",
            row.train_loss,
            row.val_loss,
            row.val_acc
        );
        on_epoch(&row);
        if best.as_ref().is_none_or(|(acc, _, _)| metrics.accuracy > *acc) {
            best = Some((metrics.accuracy, epoch, model.clone()));
        }
        history.push(row);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        history,
    })
}

/// Per-window eval-mode logits, in dataset order.
pub fn predict_logits(model: &Model, dataset: &WindowedDataset, threads: usize) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<usize>> = (0..dataset.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(<[usize]>::to_vec)
        .collect();
    let run = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        let logits = model.predict(&dataset.batch(idx)?, None)?;
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(<[f64]>::to_vec).collect())
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let results: Vec<Result<Vec<Vec<f64>>>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(|| group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut out = Vec::with_capacity(dataset.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn sample_loss(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn evaluate(model: &Model, dataset: &WindowedDataset) -> Result<Metrics> {
    evaluate_with_threads(model, dataset, 1)
}

pub fn evaluate_with_threads(model: &Model, dataset: &WindowedDataset, threads: usize) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    check_classes(model, dataset)?;
    let logits = predict_logits(model, dataset, threads)?;
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let loss = logits
        .iter()
        .zip(&dataset.labels)
        .map(|(l, &y)| sample_loss(l, y))
        .sum::<f64>()
        / dataset.len() as f64;
    Metrics::from_predictions(&predictions, &dataset.labels, model.config().num_classes, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, AttentionVariant};
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::{Backbone, ModelConfig};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_steps_every_fifty_epochs() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.001);
        assert_eq!(lr_at(49, &c), 0.001);
        assert!((lr_at(50, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_at(100, &c) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn quadratic_converges_through_the_engine() {
        let mut theta = [Tensor::scalar(0.0)];
        let mut state = AdamState::new(&theta);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let t = g.leaf(theta[0].clone().with_requires_grad(true));
            let c = g.constant(Tensor::scalar(-3.0));
            let d = g.add(t, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            let grad = grads.get(t).unwrap().to_vec();
            adam_step(&mut theta, &[&grad], &mut state, 0.01).unwrap();
        }
        assert!((theta[0].data()[0] - 3.0).abs() < 1e-3, "{}", theta[0].data()[0]);
    }

    fn tiny() -> (Model, WindowedDataset, WindowedDataset) {
        let data = synth_generate(&SynthConfig {
            seed: 1,
            num_classes: 3,
            per_class: 8,
            axes: 2,
            width: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = Model::build(ModelConfig {
            backbone: Backbone::Residual,
            channel_plan: vec![4, 4],
            num_classes: 3,
            sensor_axes: 2,
            window_length: 16,
            attention: AttentionConfig::with_variant(AttentionVariant::ChannelThenTemporal),
            seed: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let val = data.subset(&(0..6).collect::<Vec<_>>());
        (model, data, val)
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 5,
            base_lr: lr,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (model, train_set, val) = tiny();
        let out = train(model.clone(), &train_set, &val, &cfg(0.0)).unwrap();
        assert_eq!(out.final_model.params(), model.params());
    }

    #[test]
    fn training_is_deterministic() {
        let (model, train_set, val) = tiny();
        let a = train(model.clone(), &train_set, &val, &cfg(1e-2)).unwrap();
        let b = train(model, &train_set, &val, &cfg(1e-2)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.history.len(), 2);
        assert!(a.history.iter().all(|r| r.train_loss >= 0.0));
    }

    #[test]
    fn evaluation_independent_of_threads() {
        let (model, data, _) = tiny();
        let big = {
            let mut d = data.clone();
            for _ in 0..12 {
                d.extend(data.clone()).unwrap();
            }
            d
        };
        assert_eq!(evaluate(&model, &big).unwrap(), evaluate_with_threads(&model, &big, 3).unwrap());
    }

    #[test]
    fn class_mismatch_rejected() {
        let (model, data, _) = tiny();
        let mut d = data;
        d.class_names.push("extra".into());
        assert!(matches!(evaluate(&model, &d), Err(Error::Config(_))));
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let rows = vec![HistoryRow {
            epoch: 0,
            lr: 0.001,
            train_loss: 1.25,
            val_loss: 1.5,
            val_acc: 0.5,
        }];
        write_history(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_loss,val_acc\n0,0.001,1.25,1.5,0.5\n"), "{text}");
        assert_eq!(read_history(&path).unwrap(), rows);
    }
}
