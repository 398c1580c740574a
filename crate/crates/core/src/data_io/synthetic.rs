//! Seeded synthetic source/target benchmarks.
//!
//! Every class of the universe gets a uniformly random unit anchor, which is
//! also its text feature. Source samples scatter around their anchor. Target
//! samples scatter around a shifted anchor: rotated by a fixed angle within a
//! random 2-plane through the anchor, then offset by a per-class jitter.
//!
//! All noise terms are isotropic Gaussians with the given per-coordinate σ.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actp::TextualPrototypeSet;
use crate::classifier::LabeledFeatures;
use crate::error::{Error, Result};
use crate::mieci::{FrozenEncoder, ToyEncoder, DEFAULT_CONTEXT_SCALE, DEFAULT_GRID};
use crate::numeric::{dot, l2_normalize, FeatureMatrix};
use crate::rng::{self, purpose};

use super::manifest::{split_regime, ClassCounts, DatasetManifest, Regime, ToyEncoderSpec};
use super::store::FeatureStore;
use super::tables::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub mean_jitter: f64,
    pub noise: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            mean_jitter: 0.05,
            noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub common_count: usize,
    pub source_private_count: usize,
    pub target_private_count: usize,
    /// Labeled source training samples per class.
    pub shots_per_class: usize,
    /// Extra labeled source samples per class kept for validation.
    pub val_shots_per_class: usize,
    /// Unlabeled target samples per class.
    pub samples_per_class: usize,
    pub shift: DomainShift,
    pub cluster_spread: f64,
    pub grid: usize,
    pub context_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            common_count: 5,
            source_private_count: 5,
            target_private_count: 5,
            shots_per_class: 16,
            val_shots_per_class: 4,
            samples_per_class: 200,
            shift: DomainShift::default(),
            cluster_spread: 0.1,
            grid: DEFAULT_GRID,
            context_scale: DEFAULT_CONTEXT_SCALE,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            common: self.common_count,
            source_private: self.source_private_count,
            target_private: self.target_private_count,
        }
    }

    pub fn regime(&self) -> Regime {
        Regime::from_private_counts(self.source_private_count, self.target_private_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.common_count == 0 {
            return Err(Error::InvalidRegime("at least one common class is required".into()));
        }
        let bad = |detail: String| Err(Error::InvalidConfig(detail));
        if self.dim < 2 {
            return bad(format!("dim {} < 2", self.dim));
        }
        if self.shots_per_class == 0 || self.samples_per_class == 0 {
            return bad("shots_per_class and samples_per_class must be positive".into());
        }
        for (name, v) in [
            ("rotation_deg", self.shift.rotation_deg),
            ("mean_jitter", self.shift.mean_jitter),
            ("noise", self.shift.noise),
            ("cluster_spread", self.cluster_spread),
            ("context_scale", self.context_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v}"));
            }
        }
        if self.grid < 2 {
            return bad(format!("grid {} < 2", self.grid));
        }
        Ok(())
    }

    pub fn toy_encoder_spec(&self) -> ToyEncoderSpec {
        ToyEncoderSpec {
            dim: self.dim,
            grid: self.grid,
            context_scale: self.context_scale,
            seed: self.seed,
        }
    }
}

pub fn toy_encoder(spec: &ToyEncoderSpec) -> Result<FrozenEncoder> {
    Ok(FrozenEncoder::Toy(ToyEncoder::new(spec.dim, spec.grid, spec.context_scale, spec.seed)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    /// Labeled with head indices; the last `val_shots_per_class` of each class
    /// form the validation split.
    pub source: FeatureStore,
    /// Unlabeled.
    pub target: FeatureStore,
    /// One text feature per source class, in head order.
    pub text: FeatureStore,
    pub manifest: DatasetManifest,
    pub truth: GroundTruth,
    pub val_shots_per_class: usize,
}

impl SyntheticBenchmark {
    pub fn textual(&self) -> Result<TextualPrototypeSet> {
        TextualPrototypeSet::new(&self.text.to_matrix()?, self.manifest.source_class_names())
    }

    pub fn source_labeled(&self) -> Result<LabeledFeatures> {
        labeled_from_store(&self.source)
    }

    pub fn target_features(&self) -> Result<FeatureMatrix> {
        self.target.to_matrix()
    }

    pub fn encoder(&self) -> Result<FrozenEncoder> {
        let spec = self
            .manifest
            .toy_encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("manifest has no toy encoder".into()))?;
        toy_encoder(spec)
    }
}

/// Source samples with non-negative labels.
pub fn labeled_from_store(store: &FeatureStore) -> Result<LabeledFeatures> {
    let labels = store
        .labels()
        .ok_or_else(|| Error::InvalidConfig("source store has no label block".into()))?;
    let features = store.to_matrix()?;
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    LabeledFeatures::new(features.select(&keep), keep.iter().map(|&i| labels[i] as usize).collect())
}

fn perturb(center: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let g: f64 = StandardNormal.sample(rng);
            c + sigma * g
        })
        .collect()
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// `a` rotated by `angle` radians toward a random direction orthogonal to it.
fn rotate_in_random_plane(a: &[f64], angle: f64, rng: &mut impl Rng) -> Vec<f64> {
    let u = loop {
        let mut g = random_unit(a.len(), rng);
        let c = dot(&g, a);
        g.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
        if let Ok(u) = l2_normalize(&g) {
            break u;
        }
    };
    a.iter().zip(&u).map(|(x, y)| angle.cos() * x + angle.sin() * y).collect()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize(v)
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let split = split_regime(cfg.counts(), cfg.regime())?;
    let universe = cfg.common_count + cfg.source_private_count + cfg.target_private_count;
    let names: Vec<String> = (0..universe).map(|i| format!("class_{i:02}")).collect();
    let mut manifest = DatasetManifest::from_split(&split, names)?;
    manifest.toy_encoder = Some(cfg.toy_encoder_spec());

    let mut anchor_rng = rng::stream(cfg.seed, purpose::SYNTH_ANCHORS);
    let anchors: Vec<Vec<f64>> = (0..universe).map(|_| random_unit(cfg.dim, &mut anchor_rng)).collect();

    let text = FeatureMatrix::from_rows(&split.source.iter().map(|&c| anchors[c].clone()).collect::<Vec<_>>())?;

    let mut src_rng = rng::stream(cfg.seed, purpose::SYNTH_SOURCE);
    let per_class = cfg.shots_per_class + cfg.val_shots_per_class;
    let mut src_rows = Vec::with_capacity(split.source.len() * per_class);
    let mut src_labels = Vec::with_capacity(src_rows.capacity());
    for (head, &c) in split.source.iter().enumerate() {
        for _ in 0..per_class {
            src_rows.push(normalized(&perturb(&anchors[c], cfg.cluster_spread, &mut src_rng))?);
            src_labels.push(head as i32);
        }
    }

    let mut shift_rng = rng::stream(cfg.seed, purpose::SYNTH_SHIFT);
    let angle = cfg.shift.rotation_deg.to_radians();
    let centers: Vec<Vec<f64>> = split
        .target
        .iter()
        .map(|&c| {
            let rotated = rotate_in_random_plane(&anchors[c], angle, &mut shift_rng);
            perturb(&rotated, cfg.shift.mean_jitter, &mut shift_rng)
        })
        .collect();

    let mut tgt_rng = rng::stream(cfg.seed, purpose::SYNTH_TARGET);
    let mut tgt: Vec<(Vec<f64>, Option<usize>)> = Vec::with_capacity(split.target.len() * cfg.samples_per_class);
    for (center, &c) in centers.iter().zip(&split.target) {
        let truth = manifest.head_index(c).filter(|_| split.common.contains(&c));
        for _ in 0..cfg.samples_per_class {
            tgt.push((normalized(&perturb(center, cfg.shift.noise, &mut tgt_rng))?, truth));
        }
    }
    tgt.shuffle(&mut tgt_rng);

    let src = FeatureMatrix::from_rows(&src_rows)?;
    let tgt_features = FeatureMatrix::from_rows(&tgt.iter().map(|(v, _)| v.as_slice()).collect::<Vec<_>>())?;
    Ok(SyntheticBenchmark {
        source: FeatureStore::from_matrix(&src)?.with_labels(src_labels)?,
        target: FeatureStore::from_matrix(&tgt_features)?,
        text: FeatureStore::from_matrix(&text)?,
        manifest,
        truth: GroundTruth {
            rows: tgt.iter().enumerate().map(|(i, (_, t))| (i as u64, *t)).collect(),
        },
        val_shots_per_class: cfg.val_shots_per_class,
    })
}
