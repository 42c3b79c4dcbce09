//! Optimization, evaluation, metrics and backbone pretraining.
//!
//! Each clip of a batch gets its own graph; per-parameter gradients are
//! summed in clip order, averaged and applied by one Adam step, so a run is
//! a pure function of its seed, configuration and data.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde_json::json;

use crate::autodiff::Graph;
use crate::backbone::{frozen_branch_logits, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{init_uniform, Adam, AdamConfig, Component, ParamStore, Session};
use crate::rng::seeded_stream;
use crate::synth::Clip;
use crate::tensor::Tensor;
use crate::weights::{save_weights, WeightTable};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    /// Train accuracy that counts as converged for `epochs_to_threshold`.
    pub threshold: f64,
    /// Record wall-clock seconds in metrics. Off by default so metrics
    /// files of identical runs are identical.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 8,
            epochs: 30,
            seed: 0,
            freeze_backbone: true,
            threshold: 0.95,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Validation("batch must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Validation(format!("lr must be a finite non-negative number, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Validation("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.adam.eps <= 0.0 {
            return Err(Error::Validation("eps must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub seconds: Option<f64>,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        json!({
            "epoch": self.epoch,
            "split": self.split,
            "loss": self.loss,
            "top1": self.top1,
            "top5": self.top5,
            "trainable_params": self.trainable_params,
            "frozen_params": self.frozen_params,
            "seconds": self.seconds,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// First epoch (1-based) whose train accuracy reached the threshold.
    pub epochs_to_threshold: Option<usize>,
}

impl TrainReport {
    pub fn last(&self, split: &str) -> Option<&EpochMetrics> {
        self.history.iter().rev().find(|m| m.split == split)
    }

    pub fn best(&self, split: &str) -> Option<f64> {
        self.history
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.top1)
            .reduce(f64::max)
    }
}

/// Rank of the true label among the logits (0 = top).
fn label_rank(logits: &Tensor, label: usize) -> usize {
    let row = logits.data();
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count()
}

fn check_labels(clips: &[Clip], k: usize) -> Result<()> {
    if let Some(c) = clips.iter().find(|c| c.label >= k) {
        return Err(Error::Validation(format!("label {} out of range for {k} categories", c.label)));
    }
    Ok(())
}

/// Loss and accuracy of the fused logits. Does not touch parameters.
pub fn evaluate(model: &Model, clips: &[Clip]) -> Result<EvalMetrics> {
    if clips.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    check_labels(clips, model.config.categories)?;
    let (mut loss, mut top1, mut top5) = (0.0, 0, 0);
    for clip in clips {
        let g = Graph::new();
        let sess = Session::new(&g, &model.store);
        let out = model.forward_vars(&sess, &clip.frames)?;
        loss += out.logits.cross_entropy(&[clip.label])?.value().item();
        let rank = label_rank(&out.logits.value(), clip.label);
        top1 += usize::from(rank == 0);
        top5 += usize::from(rank < 5);
    }
    let n = clips.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
    })
}

/// Trains the model in place. `on_epoch` receives the metrics of each
/// finished epoch (train, then validation when `val` is nonempty).
pub fn train(
    model: &mut Model,
    train_set: &[Clip],
    val: &[Clip],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&[EpochMetrics]) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    check_labels(train_set, model.config.categories)?;
    check_labels(val, model.config.categories)?;
    model.store.set_component_trainable(Component::Backbone, !config.freeze_backbone);
    let (trainable_params, frozen_params) = model.store.counts();
    let mut adam = Adam::new(config.adam, model.store.len());
    let mut order_rng = seeded_stream(config.seed, 2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut top5) = (0.0, 0, 0);
        for (b, batch) in order.chunks(config.batch).enumerate() {
            let mut sum: Vec<Option<Tensor>> = vec![None; model.store.len()];
            for &i in batch {
                let clip = &train_set[i];
                let g = Graph::new();
                let sess = Session::new(&g, &model.store);
                let abort = |e: Error| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (seed {}, epoch {epoch}, batch {b}, clips {batch:?})",
                        config.seed
                    )),
                    other => other,
                };
                let out = model.forward_vars(&sess, &clip.frames).map_err(abort)?;
                let loss = out.logits.cross_entropy(&[clip.label]).map_err(abort)?;
                let lv = loss.value().item();
                if !lv.is_finite() {
                    return Err(abort(Error::Numeric(format!("loss is {lv}"))));
                }
                loss_sum += lv;
                let rank = label_rank(&out.logits.value(), clip.label);
                correct += usize::from(rank == 0);
                top5 += usize::from(rank < 5);
                let mut grads = g.backward(loss)?;
                for (slot, grad) in sum.iter_mut().zip(sess.param_grads(&mut grads)) {
                    if let Some(grad) = grad {
                        match slot {
                            Some(acc) => acc.add_assign(&grad),
                            None => *slot = Some(grad),
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in sum.iter_mut().flatten() {
                t.scale_in_place(scale);
                if !t.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient (seed {}, epoch {epoch}, batch {b}, clips {batch:?})",
                        config.seed
                    )));
                }
            }
            adam.step(&mut model.store, &sum);
        }
        let n = train_set.len() as f64;
        let seconds = config.record_time.then(|| started.elapsed().as_secs_f64());
        let mut lines = vec![EpochMetrics {
            epoch,
            split: "train",
            loss: loss_sum / n,
            top1: correct as f64 / n,
            top5: top5 as f64 / n,
            trainable_params,
            frozen_params,
            seconds,
        }];
        if report.epochs_to_threshold.is_none() && lines[0].top1 >= config.threshold {
            report.epochs_to_threshold = Some(epoch);
        }
        if !val.is_empty() {
            let m = evaluate(model, val)?;
            lines.push(EpochMetrics {
                epoch,
                split: "val",
                loss: m.loss,
                top1: m.top1,
                top5: m.top5,
                trainable_params,
                frozen_params,
                seconds,
            });
        }
        log::info!(
            "epoch {epoch}: {}",
            lines
                .iter()
                .map(|m| format!("{} loss {:.4} top1 {:.3}", m.split, m.loss, m.top1))
                .collect::<Vec<_>>()
                .join(", ")
        );
        on_epoch(&lines)?;
        report.history.extend(lines);
    }
    Ok(report)
}

/// Appends metrics as JSON lines.
pub fn append_metrics(path: &Path, lines: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    for m in lines {
        writeln!(f, "{}", m.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    save_weights(&model.store.to_table(), path)
}

/// Appearance frames per class that pretraining needs to generalize.
pub const PRETRAIN_FRAMES_PER_CLASS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 8,
            epochs: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub train_top1: f64,
    pub val_top1: f64,
}

/// Trains a fresh backbone with a temporary linear head on single-frame
/// classification and returns the backbone weights alone.
pub fn pretrain_backbone(
    backbone_config: &BackboneConfig,
    train_set: &[Clip],
    val: &[Clip],
    categories: usize,
    config: &PretrainConfig,
) -> Result<(WeightTable, PretrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Validation("pretraining set is empty".into()));
    }
    if config.batch == 0 {
        return Err(Error::Validation("batch must be at least 1".into()));
    }
    check_labels(train_set, categories)?;
    check_labels(val, categories)?;
    let mut store = ParamStore::new();
    let backbone = Backbone::init(backbone_config.clone(), &mut store, &mut seeded_stream(config.seed, 0))?;
    store.set_component_trainable(Component::Backbone, true);
    let d = backbone_config.d_model;
    let mut rng = seeded_stream(config.seed, 1);
    let head_w = store.add("pretrain.head.w", init_uniform(vec![d, categories], d, &mut rng), true, Component::AdapterLinear);
    let head_b = store.add("pretrain.head.b", Tensor::zeros(vec![categories]), true, Component::AdapterLinear);
    let mut adam = Adam::new(config.adam, store.len());
    let mut order_rng = seeded_stream(config.seed, 2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let frame_of = |clip: &Clip| -> Result<Tensor> {
        clip.frames
            .last()
            .cloned()
            .ok_or_else(|| Error::Validation("clip has no frames".into()))
    };
    let mut train_top1 = 0.0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut correct = 0;
        for batch in order.chunks(config.batch) {
            let mut sum: Vec<Option<Tensor>> = vec![None; store.len()];
            for &i in batch {
                let clip = &train_set[i];
                let g = Graph::new();
                let sess = Session::new(&g, &store);
                let trace = backbone.forward_frame(&sess, &frame_of(clip)?)?;
                let tokens = trace.states.last().expect("at least one block");
                let logits = frozen_branch_logits(tokens, &sess.p(head_w), &sess.p(head_b))?;
                correct += usize::from(label_rank(&logits.value(), clip.label) == 0);
                let loss = logits.cross_entropy(&[clip.label])?;
                let mut grads = g.backward(loss)?;
                for (slot, grad) in sum.iter_mut().zip(sess.param_grads(&mut grads)) {
                    if let Some(grad) = grad {
                        match slot {
                            Some(acc) => acc.add_assign(&grad),
                            None => *slot = Some(grad),
                        }
                    }
                }
            }
            for t in sum.iter_mut().flatten() {
                t.scale_in_place(1.0 / batch.len() as f64);
            }
            adam.step(&mut store, &sum);
        }
        train_top1 = correct as f64 / train_set.len() as f64;
        log::info!("pretrain epoch {epoch}: train top1 {train_top1:.3}");
    }

    let mut val_correct = 0;
    for clip in val {
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let trace = backbone.forward_frame(&sess, &frame_of(clip)?)?;
        let logits = frozen_branch_logits(trace.states.last().expect("block"), &sess.p(head_w), &sess.p(head_b))?;
        val_correct += usize::from(label_rank(&logits.value(), clip.label) == 0);
    }
    let val_top1 = if val.is_empty() {
        f64::NAN
    } else {
        val_correct as f64 / val.len() as f64
    };

    let mut table = WeightTable::new();
    for (_, p) in store.iter().filter(|(_, p)| p.component == Component::Backbone) {
        // rounded as the weight file stores it
        table.insert(p.name.clone(), p.value.map(|v| v as f32 as f64));
    }
    Ok((table, PretrainReport { train_top1, val_top1 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_frames, ModelConfig};
    use crate::rng::seeded;

    fn tiny_set(config: &ModelConfig, n: usize) -> Vec<Clip> {
        let mut rng = seeded(1);
        (0..n)
            .map(|i| Clip {
                frames: random_frames(config, &mut rng),
                label: i % config.categories,
            })
            .collect()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let config = ModelConfig::micro();
        let mut model = Model::new(config.clone(), 1).unwrap();
        let before = model.store.to_table();
        let tc = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            epochs: 1,
            batch: 2,
            ..Default::default()
        };
        train(&mut model, &tiny_set(&config, 2), &[], &tc, |_| Ok(())).unwrap();
        assert_eq!(model.store.to_table(), before);
    }

    #[test]
    fn training_reduces_loss_and_keeps_backbone() {
        let config = ModelConfig::micro();
        let mut model = Model::new(config.clone(), 2).unwrap();
        let hash = model.store.frozen_hash();
        let data = tiny_set(&config, 2);
        let before = evaluate(&model, &data).unwrap();
        let tc = TrainConfig {
            adam: AdamConfig { lr: 1e-2, ..Default::default() },
            epochs: 20,
            batch: 2,
            ..Default::default()
        };
        let report = train(&mut model, &data, &data, &tc, |_| Ok(())).unwrap();
        let after = evaluate(&model, &data).unwrap();
        assert!(after.loss < before.loss);
        assert_eq!(model.store.frozen_hash(), hash);
        assert_eq!(report.history.len(), 40);
        assert_eq!(evaluate(&model, &data).unwrap(), after);
        assert_eq!(after.top5, 1.0);
    }

    #[test]
    fn labels_and_empty_sets_are_validated() {
        let config = ModelConfig::micro();
        let mut model = Model::new(config.clone(), 3).unwrap();
        let mut data = tiny_set(&config, 1);
        assert!(train(&mut model, &[], &[], &TrainConfig::default(), |_| Ok(())).is_err());
        data[0].label = 9;
        assert!(matches!(evaluate(&model, &data), Err(Error::Validation(_))));
    }

    #[test]
    fn metrics_line_has_expected_keys() {
        let m = EpochMetrics {
            epoch: 1,
            split: "train",
            loss: 0.5,
            top1: 1.0,
            top5: 1.0,
            trainable_params: 3,
            frozen_params: 4,
            seconds: None,
        };
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        for key in ["epoch", "split", "loss", "top1", "top5", "trainable_params", "frozen_params", "seconds"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["seconds"].is_null());
    }
}
