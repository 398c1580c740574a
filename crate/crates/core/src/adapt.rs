//! Target adaptation of a source head and uncertainty-thresholded inference.
//!
//! [`run_adaptation`] selects K, clusters the target features once, pseudo
//! labels every sample against the textual prototypes, then trains the
//! student head for a fixed number of epochs on the image, text and mask
//! losses while an EMA teacher tracks it.

use serde::{Deserialize, Serialize};

use crate::actp::{assign_prototypes, pseudo_label, pseudo_label_all, Label, PrototypeAssignment, PseudoLabel, TextualPrototypeSet};
use crate::classifier::head::{shuffle, DEFAULT_LOGIT_SCALE};
use crate::classifier::{adamw_step, image_loss, text_loss, AdamWState, ClassifierHead, LossAndGrad, TeacherHead};
use crate::clustering::{kmeans_call_count, select_k, KCandidateSet, KMethod, KSelection};
use crate::error::{Error, Result};
use crate::mieci::{mask_loss, FrozenEncoder, DEFAULT_MASK_RATIO};
use crate::numeric::{dot, normalized_entropy, softmax, FeatureMatrix, ProbVector};
use crate::rng;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_MAX_EPOCHS: usize = 20;
pub const DEFAULT_ADAPT_LR: f64 = 1e-3;
pub const DEFAULT_ADAPT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_ADAPT_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub image: bool,
    pub text: bool,
    pub mask: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches {
        image: true,
        text: true,
        mask: true,
    };
    pub const WITHOUT_MASK: LossSwitches = LossSwitches {
        image: true,
        text: true,
        mask: false,
    };

    pub fn any(self) -> bool {
        self.image || self.text || self.mask
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub k_method: KMethod,
    /// Skip the sweep and cluster with this K.
    pub forced_k: Option<usize>,
    pub tau: f64,
    pub mask_ratio: f64,
    pub ema_decay: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Rows per optimizer step; `None` takes one full-batch step per epoch.
    /// Each epoch visits every row once in a fresh order.
    pub batch_size: Option<usize>,
    pub losses: LossSwitches,
    pub seed: u64,
    /// Keep the student parameters after every step in the run log.
    pub record_trajectory: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k_method: KMethod::Silhouette,
            forced_k: None,
            tau: DEFAULT_TAU,
            mask_ratio: DEFAULT_MASK_RATIO,
            ema_decay: DEFAULT_EMA_DECAY,
            max_epochs: DEFAULT_MAX_EPOCHS,
            lr: DEFAULT_ADAPT_LR,
            weight_decay: DEFAULT_ADAPT_WEIGHT_DECAY,
            batch_size: Some(DEFAULT_ADAPT_BATCH),
            losses: LossSwitches::ALL,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, detail: String| Err(Error::OutOfRange { what, detail });
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", format!("{} not in [0, 1]", self.tau));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask ratio", format!("{} not in [0, 1)", self.mask_ratio));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("EMA decay", format!("{} not in [0, 1]", self.ema_decay));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("optimizer", format!("lr {} weight decay {}", self.lr, self.weight_decay));
        }
        if self.batch_size == Some(0) {
            return bad("batch size", "0".into());
        }
        if matches!(self.forced_k, Some(k) if k < 2) {
            return bad("forced K", format!("{:?} < 2", self.forced_k));
        }
        Ok(())
    }

    pub fn candidates(&self, source_class_count: usize) -> KCandidateSet {
        match self.forced_k {
            Some(k) => KCandidateSet::fixed(k),
            None => KCandidateSet::from_source_classes(source_class_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub image_loss: Option<f64>,
    pub text_loss: Option<f64>,
    pub mask_loss: Option<f64>,
    pub lr: f64,
}

impl EpochLog {
    pub fn total(&self) -> f64 {
        [self.image_loss, self.text_loss, self.mask_loss].iter().flatten().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub selection: KSelection,
    /// K-means invocations made while sweeping the candidates.
    pub sweep_kmeans_calls: u64,
    /// K-means invocations made after the sweep.
    pub post_sweep_kmeans_calls: u64,
    /// Clusterings used to build prototypes. The sweep winner is reused.
    pub canonical_clusterings: u64,
    pub assignment: PrototypeAssignment,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub epochs: Vec<EpochLog>,
    /// Student parameters after each optimizer step.
    pub trajectory: Option<Vec<Vec<f64>>>,
}

impl RunLog {
    pub fn k(&self) -> usize {
        self.selection.k
    }

    pub fn unknown_pseudo_labels(&self) -> usize {
        self.pseudo_labels.iter().filter(|p| p.label.is_unknown()).count()
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub student: ClassifierHead,
    pub teacher: TeacherHead,
    pub log: RunLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub uncertainty: f64,
    pub probabilities: ProbVector,
}

fn check_classes(head: &ClassifierHead, textual: &TextualPrototypeSet) -> Result<()> {
    if head.classes() != textual.len() {
        return Err(Error::ClassCountMismatch(format!(
            "source head has {} classes, textual prototypes have {}",
            head.classes(),
            textual.len()
        )));
    }
    if head.dim() != textual.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: textual.dim(),
        });
    }
    Ok(())
}

/// K sweep over the target features, counting K-means invocations.
pub fn sweep_k(features: &FeatureMatrix, source_class_count: usize, config: &AdaptConfig) -> Result<(KSelection, u64)> {
    let before = kmeans_call_count();
    let sel = select_k(features, &config.candidates(source_class_count), config.k_method, config.seed)?;
    Ok((sel, kmeans_call_count() - before))
}

/// The full adaptation procedure.
pub fn run_adaptation(
    target: &FeatureMatrix,
    encoder: &FrozenEncoder,
    textual: &TextualPrototypeSet,
    source_head: &ClassifierHead,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    check_classes(source_head, textual)?;
    let (selection, calls) = sweep_k(target, textual.len(), config)?;
    adapt_with_selection(target, encoder, textual, source_head, selection, calls, config)
}

/// Adaptation from an already computed K sweep.
pub fn adapt_with_selection(
    target: &FeatureMatrix,
    encoder: &FrozenEncoder,
    textual: &TextualPrototypeSet,
    source_head: &ClassifierHead,
    selection: KSelection,
    sweep_kmeans_calls: u64,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    check_classes(source_head, textual)?;
    if target.dim() != source_head.dim() {
        return Err(Error::DimensionMismatch {
            expected: source_head.dim(),
            got: target.dim(),
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let calls_before = kmeans_call_count();

    let mut student = source_head.clone();
    let mut teacher = TeacherHead::new(source_head.clone(), config.ema_decay)?;

    let assignment = assign_prototypes(textual, &selection.model)?;
    let pseudo_labels = pseudo_label_all(target, textual, &assignment);
    let classes = textual.len();
    let targets: Vec<ProbVector> = pseudo_labels
        .iter()
        .map(|p| match p.label {
            Label::Class(c) => ProbVector::one_hot(classes, c),
            Label::Unknown => ProbVector::uniform(classes),
        })
        .collect();

    let n = target.rows();
    let batch = config.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = rng::stream(config.seed, rng::purpose::ADAPT_BATCHES);
    let mut opt = AdamWState::new(student.params().len());
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut trajectory = config.record_trajectory.then(Vec::new);

    for epoch in 0..config.max_epochs {
        let masked = if config.losses.mask {
            Some(masked_features(target, encoder, epoch as u64, config)?)
        } else {
            None
        };
        if batch < n {
            shuffle(&mut order, &mut batch_rng);
        }
        let mut sums = [0.0f64; 3];
        let mut steps = 0usize;
        for rows in order.chunks(batch) {
            let mut total = LossAndGrad::zeros(student.params().len());
            let full = target.select(rows);
            if config.losses.image {
                let t: Vec<ProbVector> = rows.iter().map(|&r| targets[r].clone()).collect();
                let l = image_loss(&student, &full, &t)?;
                sums[0] += l.loss;
                total.add_assign(&l);
            }
            if config.losses.text {
                let l = text_loss(&student, textual)?;
                sums[1] += l.loss;
                total.add_assign(&l);
            }
            if let Some(masked) = &masked {
                let l = mask_loss(&teacher, &student, &full, &masked.select(rows))?;
                sums[2] += l.loss;
                total.add_assign(&l);
            }
            if !total.loss.is_finite() {
                return Err(Error::DegenerateFeature);
            }
            adamw_step(student.params_mut(), &total.grad, &mut opt, config.lr, config.weight_decay)?;
            teacher.ema_update(&student)?;
            if let Some(t) = trajectory.as_mut() {
                t.push(student.params().to_vec());
            }
            steps += 1;
        }
        let mean = |on: bool, s: f64| on.then(|| s / steps as f64);
        epochs.push(EpochLog {
            epoch: epoch + 1,
            image_loss: mean(config.losses.image, sums[0]),
            text_loss: mean(config.losses.text, sums[1]),
            mask_loss: mean(config.losses.mask, sums[2]),
            lr: config.lr,
        });
    }

    let log = RunLog {
        selection,
        sweep_kmeans_calls,
        post_sweep_kmeans_calls: kmeans_call_count() - calls_before,
        canonical_clusterings: 1,
        assignment,
        pseudo_labels,
        epochs,
        trajectory,
    };
    Ok(AdaptOutcome { student, teacher, log })
}

/// One masked view of every target row for the given epoch.
pub fn masked_features(target: &FeatureMatrix, encoder: &FrozenEncoder, epoch: u64, config: &AdaptConfig) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(target.rows() * target.dim());
    for (row, z) in target.iter_rows().enumerate() {
        let v = encoder.masked_view(row as u64, z, epoch, config.seed, config.mask_ratio)?;
        if v.len() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: v.len(),
            });
        }
        data.extend(v);
    }
    FeatureMatrix::new(target.rows(), target.dim(), data)
}

/// Head prediction with normalized-entropy uncertainty; UNKNOWN iff the
/// uncertainty exceeds `tau`.
pub fn infer(z: &[f64], head: &ClassifierHead, tau: f64) -> Result<Prediction> {
    let probabilities = head.probabilities(z)?;
    Ok(prediction_from(probabilities, tau))
}

pub fn prediction_from(probabilities: ProbVector, tau: f64) -> Prediction {
    let uncertainty = normalized_entropy(&probabilities);
    let label = if uncertainty > tau {
        Label::Unknown
    } else {
        Label::Class(probabilities.argmax())
    };
    Prediction {
        label,
        uncertainty,
        probabilities,
    }
}

pub fn infer_all(features: &FeatureMatrix, head: &ClassifierHead, tau: f64) -> Result<Vec<Prediction>> {
    features.iter_rows().map(|z| infer(z, head, tau)).collect()
}

/// Prediction by the pseudo-label rule alone, without a trained head.
/// Uncertainty is 0 for a class decision and 1 for UNKNOWN.
pub fn zero_shot_label(z: &[f64], textual: &TextualPrototypeSet, assignment: &PrototypeAssignment) -> Prediction {
    let logits: Vec<f64> = textual
        .matrix()
        .iter_rows()
        .map(|t| DEFAULT_LOGIT_SCALE * dot(z, t))
        .collect();
    let label = pseudo_label(z, textual, assignment).label;
    Prediction {
        label,
        uncertainty: if label.is_unknown() { 1.0 } else { 0.0 },
        probabilities: softmax(&logits),
    }
}

pub fn zero_shot_all(features: &FeatureMatrix, textual: &TextualPrototypeSet, assignment: &PrototypeAssignment) -> Vec<Prediction> {
    features
        .iter_rows()
        .map(|z| zero_shot_label(z, textual, assignment))
        .collect()
}
