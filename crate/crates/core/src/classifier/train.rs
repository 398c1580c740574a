//! Few-shot training of the source classifier over frozen features.
//!
//! Only labeled source features and class text features are in scope here;
//! nothing from the target domain is reachable through this interface.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::actp::TextualPrototypeSet;
use crate::error::{Error, Result};
use crate::numeric::{FeatureMatrix, ProbVector};
use crate::rng;

use super::head::{
    self, soft_cross_entropy, AdapterHead, ClassifierHead, LinearHead, DEFAULT_LOGIT_SCALE, DEFAULT_RESIDUAL_RATIO,
};
use super::optim::{adamw_step, AdamWState};
use super::schedule::{batch_size_for, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceModelKind {
    /// Linear layer trained on image features only.
    LinearProbe,
    /// Residual adapter classified against class text features.
    Adapter,
    /// Linear layer trained on batches that are half image, half text features.
    CrossModal,
}

impl fmt::Display for SourceModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceModelKind::LinearProbe => "linear_probe",
            SourceModelKind::Adapter => "adapter",
            SourceModelKind::CrossModal => "cross_modal",
        })
    }
}

impl FromStr for SourceModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" | "linear-probe" => Ok(SourceModelKind::LinearProbe),
            "adapter" => Ok(SourceModelKind::Adapter),
            "cross_modal" | "cross-modal" => Ok(SourceModelKind::CrossModal),
            other => Err(Error::InvalidConfig(format!(
                "unknown source model {other:?} (expected linear_probe, adapter or cross_modal)"
            ))),
        }
    }
}

/// Features with class indices in source-class space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} features for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits off the last `per_class` samples of every class as validation.
    pub fn holdout_per_class(&self, per_class: usize) -> (LabeledFeatures, LabeledFeatures) {
        let classes = self.labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut seen_from_end = vec![0usize; classes];
        let mut is_val = vec![false; self.len()];
        for i in (0..self.len()).rev() {
            let c = self.labels[i];
            if seen_from_end[c] < per_class {
                seen_from_end[c] += 1;
                is_val[i] = true;
            }
        }
        let pick = |want: bool| {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| is_val[i] == want).collect();
            LabeledFeatures {
                features: self.features.select(&idx),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
            }
        };
        (pick(false), pick(true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrainConfig {
    pub kind: SourceModelKind,
    pub schedule: TrainSchedule,
    /// Defaults to [`batch_size_for`] the source class count.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl SourceTrainConfig {
    pub fn new(kind: SourceModelKind, seed: u64) -> Self {
        Self {
            kind,
            schedule: TrainSchedule::default(),
            batch_size: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationPoint {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SourceTrainOutcome {
    /// Parameters at the best validation evaluation.
    pub head: ClassifierHead,
    pub batch_size: usize,
    pub image_rows_per_batch: usize,
    pub text_rows_per_batch: usize,
    pub curve: Vec<ValidationPoint>,
    pub best_val_accuracy: f64,
    pub best_iter: usize,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

/// Mean cross-entropy of `head` on labeled data.
pub fn mean_loss(head: &ClassifierHead, data: &LabeledFeatures) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let classes = head.classes();
    let targets: Vec<ProbVector> = data.labels.iter().map(|&y| ProbVector::one_hot(classes, y)).collect();
    Ok(soft_cross_entropy(head, data.features.iter_rows(), &targets)?.loss)
}

pub fn accuracy(head: &ClassifierHead, data: &LabeledFeatures) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut correct = 0;
    for (z, &y) in data.features.iter_rows().zip(&data.labels) {
        if head.probabilities(z)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a source head with AdamW under `config.schedule`, evaluating on
/// `validation` every `eval_every` iterations and keeping the best head.
/// An evaluation improves on the best so far with higher accuracy, or equal
/// accuracy and lower validation loss.
pub fn train_source(
    train: &LabeledFeatures,
    validation: &LabeledFeatures,
    textual: &TextualPrototypeSet,
    config: &SourceTrainConfig,
) -> Result<SourceTrainOutcome> {
    if validation.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.schedule.validate()?;
    let classes = textual.len();
    if let Some(&bad) = train.labels.iter().chain(&validation.labels).find(|&&y| y >= classes) {
        return Err(Error::ClassCountMismatch(format!(
            "label {bad} outside the {classes} source classes"
        )));
    }
    if train.features.dim() != textual.dim() || validation.features.dim() != textual.dim() {
        return Err(Error::DimensionMismatch {
            expected: textual.dim(),
            got: train.features.dim(),
        });
    }

    let batch_size = match config.batch_size {
        Some(b) if b >= 2 => b,
        Some(b) => return Err(Error::InvalidConfig(format!("batch size {b} too small"))),
        None => batch_size_for(classes)?,
    };
    let (image_rows, text_rows) = match config.kind {
        SourceModelKind::CrossModal => (batch_size - batch_size / 2, batch_size / 2),
        _ => (batch_size, 0),
    };

    let mut head = match config.kind {
        SourceModelKind::LinearProbe | SourceModelKind::CrossModal => {
            ClassifierHead::Linear(LinearHead::init(classes, textual.dim(), config.seed))
        }
        SourceModelKind::Adapter => ClassifierHead::Adapter(AdapterHead::init(
            textual,
            DEFAULT_RESIDUAL_RATIO,
            DEFAULT_LOGIT_SCALE,
            config.seed,
        )?),
    };

    let mut rng = rng::stream(config.seed, rng::purpose::SOURCE_BATCHES);
    let mut image_order = Cycler::new((0..train.len()).collect(), &mut rng);
    let mut text_order = Cycler::new((0..classes).collect(), &mut rng);
    let mut state = AdamWState::new(head.params().len());
    let sched = &config.schedule;

    let mut curve = Vec::new();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, head.clone());
    let mut stale = 0;
    let mut loss_acc = 0.0;
    let mut loss_count = 0;
    let mut iterations_run = 0;
    let mut stopped_early = false;

    for iter in 0..sched.total_iters {
        let lr = sched.lr_at(iter)?;
        let idx = image_order.take(image_rows, &mut rng);
        let targets: Vec<ProbVector> = idx.iter().map(|&i| ProbVector::one_hot(classes, train.labels[i])).collect();
        let mut step = soft_cross_entropy(&head, idx.iter().map(|&i| train.features.row(i)), &targets)?;
        if text_rows > 0 {
            let cls = text_order.take(text_rows, &mut rng);
            let text_targets: Vec<ProbVector> = cls.iter().map(|&c| ProbVector::one_hot(classes, c)).collect();
            let text_part = soft_cross_entropy(&head, cls.iter().map(|&c| textual.row(c)), &text_targets)?;
            step.add_assign(&text_part);
        }
        adamw_step(head.params_mut(), &step.grad, &mut state, lr, sched.weight_decay)?;
        loss_acc += step.loss;
        loss_count += 1;
        iterations_run = iter + 1;

        let last = iter + 1 == sched.total_iters;
        if (iter + 1) % sched.eval_every == 0 || last {
            let val_accuracy = accuracy(&head, validation)?;
            let val_loss = mean_loss(&head, validation)?;
            curve.push(ValidationPoint {
                iter: iter + 1,
                lr,
                train_loss: loss_acc / loss_count as f64,
                val_accuracy,
                val_loss,
            });
            loss_acc = 0.0;
            loss_count = 0;
            if val_accuracy > best.0 || (val_accuracy == best.0 && val_loss < best.1) {
                best = (val_accuracy, val_loss, iter + 1, head.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= sched.patience {
                    stopped_early = !last;
                    break;
                }
            }
        }
    }

    Ok(SourceTrainOutcome {
        head: best.3,
        batch_size,
        image_rows_per_batch: image_rows,
        text_rows_per_batch: text_rows,
        curve,
        best_val_accuracy: best.0,
        best_iter: best.2,
        iterations_run,
        stopped_early,
    })
}

/// Endless reshuffled pass over a list of indices.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(mut items: Vec<usize>, rng: &mut impl rand::Rng) -> Self {
        head::shuffle(&mut items, rng);
        Self { items, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                head::shuffle(&mut self.items, rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos]);
            self.pos += 1;
        }
        out
    }
}
