//! Auxiliary classifier training and per-sample loss inference.

use candle_core::{DType, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use workbench_core::augment::{augment, AugmentConfig};
use workbench_core::objective::softmax;
use workbench_core::triage::{LossEntry, LossFailure, LossReport};
use workbench_core::{Image, SizeReport};

use crate::data::{labels_tensor, to_input, LabeledImage};
use crate::error::{LearnError, Result};
use crate::model::Classifier;
use crate::params::{self, Snapshot};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValidationAccuracy,
    ValidationLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub enabled: bool,
    pub patience: usize,
    pub monitor: Monitor,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            enabled: true,
            patience: 20,
            monitor: Monitor::ValidationAccuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stopping: EarlyStopping,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// When set, `|train| + |validation| < n_max` is checked before training.
    pub n_max: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            early_stopping: EarlyStopping::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            n_max: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LearnError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnError::Config("learning_rate must be positive".into()));
        }
        if self.early_stopping.enabled && self.early_stopping.patience == 0 {
            return Err(LearnError::Config("early stopping patience must be at least 1".into()));
        }
        self.augment.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss on augmented samples.
    pub train_loss: f64,
    /// Accuracy on the unaugmented training set.
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were returned, when early stopping is enabled.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// Stats of the returned weights.
    pub fn returned(&self) -> Option<&EpochStats> {
        match self.best_epoch {
            Some(e) => self.epochs.iter().find(|s| s.epoch == e),
            None => self.epochs.last(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn batch_input(model: &Classifier, images: &[&Image]) -> Result<Tensor> {
    to_input(images, model.dtype(), model.device())
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate(model: &Classifier, samples: &[LabeledImage]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(LearnError::EmptySplit("evaluation"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<_> = chunk.iter().map(|s| s.label).collect();
        let logits = model.logits(&batch_input(model, &images)?, false)?;
        let target = labels_tensor(&labels, model.device())?;
        let l = candle_nn::loss::cross_entropy(&logits, &target)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        loss += l * chunk.len() as f64;
        let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| **p as u16 == l.0).count();
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

fn improved(monitor: Monitor, candidate: &EpochStats, best: Option<&EpochStats>) -> bool {
    match (monitor, best) {
        (_, None) => true,
        (Monitor::ValidationAccuracy, Some(b)) => candidate.validation_accuracy > b.validation_accuracy,
        (Monitor::ValidationLoss, Some(b)) => candidate.validation_loss < b.validation_loss,
    }
}

/// Trains `model` with Adam on augmented minibatches. Sample `i` of epoch
/// `e` is augmented with counter `e · |train| + i`, so runs are reproducible
/// for a fixed seed. With early stopping the best-validation weights are
/// restored before returning.
pub fn train(
    model: Classifier,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
) -> Result<(Classifier, History)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(LearnError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(LearnError::EmptySplit("validation"));
    }
    if let Some(n_max) = config.n_max {
        SizeReport::new(train_set.len(), val_set.len(), n_max).into_result()?;
    }
    let classes = model.config().num_classes;
    let mut present = vec![false; classes];
    for s in train_set.iter().chain(val_set) {
        if s.label.index() >= classes {
            return Err(LearnError::Mismatch(format!("{}: label {} outside {classes} classes", s.id, s.label.0)));
        }
    }
    for s in train_set {
        present[s.label.index()] = true;
    }
    for (c, p) in present.iter().enumerate() {
        if !p {
            log::warn!("class {c} has no training samples");
        }
    }

    let mut history = History::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    let mut opt = AdamW::new(
        params::trainable(model.varmap()),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(EpochStats, Snapshot)> = None;
    let mut stale = 0usize;
    let n = train_set.len() as u64;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<Image> = batch
                .iter()
                .map(|&i| augment(&train_set[i].image, &config.augment, epoch as u64 * n + i as u64))
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let labels: Vec<_> = batch.iter().map(|&i| train_set[i].label).collect();
            let logits = model.logits(&batch_input(&model, &refs)?, true)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &labels_tensor(&labels, model.device())?)?;
            opt.backward_step(&loss)?;
            let l = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            loss_sum += l * batch.len() as f64;
        }
        let on_train = evaluate(&model, train_set)?;
        let on_val = evaluate(&model, val_set)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: on_train.accuracy,
            validation_loss: on_val.loss,
            validation_accuracy: on_val.accuracy,
        };
        log::debug!(
            "epoch {}: loss {:.4} train acc {:.3} val acc {:.3}",
            stats.epoch,
            stats.train_loss,
            stats.train_accuracy,
            stats.validation_accuracy
        );
        if !stats.train_loss.is_finite() {
            return Err(LearnError::Mismatch(format!("training loss diverged at epoch {}", stats.epoch)));
        }
        history.epochs.push(stats);
        if config.early_stopping.enabled {
            if improved(config.early_stopping.monitor, &stats, best.as_ref().map(|b| &b.0)) {
                best = Some((stats, Snapshot::take(model.varmap())?));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.early_stopping.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((stats, snapshot)) = best {
        snapshot.restore(model.varmap())?;
        history.best_epoch = Some(stats.epoch);
    }
    Ok((model, history))
}

/// Scores every sample in inference mode. Samples whose shape does not
/// match the model input become failures instead of entries.
pub fn infer_losses(model: &Classifier, samples: &[LabeledImage]) -> Result<LossReport> {
    let (h, w, c) = model.config().input_size;
    let classes = model.config().num_classes;
    let mut report = LossReport::default();
    let mut ok: Vec<&LabeledImage> = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.image.height(), s.image.width(), s.image.channels()) != (h, w, c) {
            report.failures.push(LossFailure {
                id: s.id.clone(),
                message: format!(
                    "image is {}x{}x{}, model expects {h}x{w}x{c}",
                    s.image.height(),
                    s.image.width(),
                    s.image.channels()
                ),
            });
        } else if s.label.index() >= classes {
            report.failures.push(LossFailure {
                id: s.id.clone(),
                message: format!("label {} outside {classes} classes", s.label.0),
            });
        } else {
            ok.push(s);
        }
    }
    for chunk in ok.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let logits = model
            .logits(&batch_input(model, &images)?, false)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        for (s, row) in chunk.iter().zip(logits) {
            if row.iter().any(|v| !v.is_finite()) {
                report.failures.push(LossFailure {
                    id: s.id.clone(),
                    message: "non-finite logits".into(),
                });
                continue;
            }
            report
                .entries
                .push(LossEntry::from_probabilities(s.id.clone(), s.label, softmax(&row)));
        }
    }
    Ok(report)
}
