//! Calibration against textual prototypes.
//!
//! Image prototypes come from one clustering of the target features. Each
//! source class is matched to its most similar image prototype; every other
//! prototype becomes a negative for that class. A target sample takes the class
//! of its nearest textual prototype only if that similarity is at least the
//! similarity to the class's best negative, and is marked unknown otherwise.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::numeric::{argmax, dot, FeatureMatrix};

/// A class index in source-class space, or the unknown symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Unknown => None,
        }
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, Label::Unknown)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Unknown => f.write_str("unknown"),
        }
    }
}

/// One unit text feature per source class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualPrototypeSet {
    prototypes: FeatureMatrix,
    class_names: Vec<String>,
}

impl TextualPrototypeSet {
    /// Rows are re-normalized; `class_names` must match the row count.
    pub fn new(prototypes: &FeatureMatrix, class_names: Vec<String>) -> Result<Self> {
        if prototypes.rows() != class_names.len() {
            return Err(Error::ClassCountMismatch(format!(
                "{} prototypes for {} class names",
                prototypes.rows(),
                class_names.len()
            )));
        }
        if prototypes.is_empty() {
            return Err(Error::ClassCountMismatch("no source classes".into()));
        }
        Ok(Self {
            prototypes: prototypes.normalized()?,
            class_names,
        })
    }

    /// Names the classes `class_0`, `class_1`, ...
    pub fn unnamed(prototypes: &FeatureMatrix) -> Result<Self> {
        let names = (0..prototypes.rows()).map(|c| format!("class_{c}")).collect();
        Self::new(prototypes, names)
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.prototypes
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Positive and negative image prototypes per source class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeAssignment {
    /// Unit-normalized cluster centroids.
    pub prototypes: FeatureMatrix,
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl PrototypeAssignment {
    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub label: Label,
    /// Textual similarity minus best negative similarity.
    pub margin: f64,
}

pub fn assign_prototypes(textual: &TextualPrototypeSet, model: &ClusterModel) -> Result<PrototypeAssignment> {
    let k = model.k();
    if k < 2 {
        return Err(Error::NoNegatives);
    }
    if model.centroids.dim() != textual.dim() {
        return Err(Error::DimensionMismatch {
            expected: textual.dim(),
            got: model.centroids.dim(),
        });
    }
    let prototypes = model.centroids.normalized()?;
    let mut positive = Vec::with_capacity(textual.len());
    let mut negatives = Vec::with_capacity(textual.len());
    for c in 0..textual.len() {
        let sims: Vec<f64> = prototypes.iter_rows().map(|v| dot(textual.row(c), v)).collect();
        let p = argmax(&sims);
        positive.push(p);
        negatives.push((0..k).filter(|&j| j != p).collect());
    }
    Ok(PrototypeAssignment {
        prototypes,
        positive,
        negatives,
    })
}

pub fn pseudo_label(z: &[f64], textual: &TextualPrototypeSet, assignment: &PrototypeAssignment) -> PseudoLabel {
    let text_sims: Vec<f64> = textual.matrix().iter_rows().map(|t| dot(z, t)).collect();
    let class = argmax(&text_sims);
    let s_pos = text_sims[class];
    let s_neg = assignment.negatives[class]
        .iter()
        .map(|&j| dot(z, assignment.prototypes.row(j)))
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = s_pos - s_neg;
    PseudoLabel {
        label: if s_pos >= s_neg { Label::Class(class) } else { Label::Unknown },
        margin,
    }
}

pub fn pseudo_label_all(
    features: &FeatureMatrix,
    textual: &TextualPrototypeSet,
    assignment: &PrototypeAssignment,
) -> Vec<PseudoLabel> {
    features
        .iter_rows()
        .map(|z| pseudo_label(z, textual, assignment))
        .collect()
}
