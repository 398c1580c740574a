//! Open-set evaluation.
//!
//! OS* is the mean accuracy over common classes present in the target, UNK
//! the fraction of target-private samples rejected as UNKNOWN,
//! `OS = (|C^s| OS* + UNK) / (|C^s| + 1)` and HOS the harmonic mean of OS*
//! and UNK. Without target-private samples UNK and HOS are undefined and OS
//! equals OS*.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::actp::Label;
use crate::data_io::{DatasetManifest, GroundTruth, PredictionRow};
use crate::error::{Error, Result};

pub const DEFAULT_HIST_BINS: usize = 10;

/// `(|C^s| os_star + unk) / (|C^s| + 1)`.
pub fn os_from_rates(os_star: f64, unk: f64, source_class_count: usize) -> f64 {
    let cs = source_class_count as f64;
    (cs * os_star + unk) / (cs + 1.0)
}

/// Harmonic mean, 0 when either rate is 0.
pub fn hos_from_rates(os_star: f64, unk: f64) -> f64 {
    if os_star <= 0.0 || unk <= 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / (os_star + unk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    /// `bins + 1` uniform edges on `[0, 1]`.
    pub edges: Vec<f64>,
    pub common: Vec<usize>,
    pub private: Vec<usize>,
}

impl UncertaintyHistogram {
    pub fn bins(&self) -> usize {
        self.common.len()
    }

    pub fn to_csv(&self) -> String {
        let nc: usize = self.common.iter().sum();
        let np: usize = self.private.iter().sum();
        let density = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        let mut out = String::from("bin,lo,hi,common_count,private_count,common_density,private_density\n");
        for b in 0..self.bins() {
            let _ = writeln!(
                out,
                "{b},{:.6},{:.6},{},{},{:.9},{:.9}",
                self.edges[b],
                self.edges[b + 1],
                self.common[b],
                self.private[b],
                density(self.common[b], nc),
                density(self.private[b], np)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub os_star: f64,
    /// `None` when the target has no private samples.
    pub unk: Option<f64>,
    pub os: f64,
    pub hos: Option<f64>,
    /// Accuracy per common class present in the target, by class name.
    pub per_class: BTreeMap<String, f64>,
    pub n_common: usize,
    pub n_private: usize,
    pub source_class_count: usize,
    pub uncertainty_histogram: UncertaintyHistogram,
}

fn na(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "N/A".to_owned(), |x| format!("{:.4}", x * scale))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "os_star,unk,os,hos,n_common,n_private";

    /// One CSV row in percent, `N/A` for undefined values.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            na(Some(self.os_star), 100.0),
            na(self.unk, 100.0),
            na(Some(self.os), 100.0),
            na(self.hos, 100.0),
            self.n_common,
            self.n_private
        )
    }

    pub fn hos_percent(&self) -> Option<f64> {
        self.hos.map(|h| 100.0 * h)
    }
}

/// Ground-truth head index per prediction, checking that both tables cover
/// exactly the same sample ids.
fn align(predictions: &[PredictionRow], truth: &GroundTruth) -> Result<Vec<(Label, f64, Option<usize>)>> {
    if predictions.len() != truth.rows.len() {
        return Err(Error::MisalignedIds(format!(
            "{} predictions for {} ground-truth rows",
            predictions.len(),
            truth.rows.len()
        )));
    }
    let mut by_id: HashMap<u64, Option<usize>> = HashMap::with_capacity(truth.rows.len());
    for &(id, t) in &truth.rows {
        if by_id.insert(id, t).is_some() {
            return Err(Error::MisalignedIds(format!("ground-truth id {id} repeats")));
        }
    }
    let mut out = Vec::with_capacity(predictions.len());
    for p in predictions {
        let t = by_id
            .remove(&p.sample_id)
            .ok_or_else(|| Error::MisalignedIds(format!("prediction id {} has no ground truth", p.sample_id)))?;
        out.push((p.label, p.uncertainty, t));
    }
    Ok(out)
}

pub fn uncertainty_export(predictions: &[PredictionRow], truth: &GroundTruth, bins: usize) -> Result<UncertaintyHistogram> {
    let rows = align(predictions, truth)?;
    histogram(&rows, bins)
}

fn histogram(rows: &[(Label, f64, Option<usize>)], bins: usize) -> Result<UncertaintyHistogram> {
    if bins < 2 {
        return Err(Error::OutOfRange {
            what: "histogram bins",
            detail: format!("{bins} < 2"),
        });
    }
    let mut common = vec![0; bins];
    let mut private = vec![0; bins];
    for &(_, u, t) in rows {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::OutOfRange {
                what: "uncertainty",
                detail: format!("{u} not in [0, 1]"),
            });
        }
        let b = ((u * bins as f64) as usize).min(bins - 1);
        match t {
            Some(_) => common[b] += 1,
            None => private[b] += 1,
        }
    }
    Ok(UncertaintyHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        common,
        private,
    })
}

pub fn evaluate(predictions: &[PredictionRow], truth: &GroundTruth, manifest: &DatasetManifest) -> Result<EvalReport> {
    evaluate_with_bins(predictions, truth, manifest, DEFAULT_HIST_BINS)
}

pub fn evaluate_with_bins(
    predictions: &[PredictionRow],
    truth: &GroundTruth,
    manifest: &DatasetManifest,
    bins: usize,
) -> Result<EvalReport> {
    let rows = align(predictions, truth)?;
    let cs = manifest.source_class_count();
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut n_private, mut rejected) = (0usize, 0usize);
    for &(label, _, t) in &rows {
        match t {
            Some(c) => {
                if c >= cs {
                    return Err(Error::ClassCountMismatch(format!(
                        "ground-truth class {c} outside {cs} source classes"
                    )));
                }
                let e = hits.entry(c).or_default();
                e.1 += 1;
                if label == Label::Class(c) {
                    e.0 += 1;
                }
            }
            None => {
                n_private += 1;
                if label.is_unknown() {
                    rejected += 1;
                }
            }
        }
    }
    let names = manifest.source_class_names();
    let per_class: BTreeMap<String, f64> = hits
        .iter()
        .map(|(&c, &(ok, n))| (names[c].clone(), ok as f64 / n as f64))
        .collect();
    let os_star = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    let unk = (n_private > 0).then(|| rejected as f64 / n_private as f64);
    let os = unk.map_or(os_star, |u| os_from_rates(os_star, u, cs));
    Ok(EvalReport {
        os_star,
        unk,
        os,
        hos: unk.map(|u| hos_from_rates(os_star, u)),
        per_class,
        n_common: rows.len() - n_private,
        n_private,
        source_class_count: cs,
        uncertainty_histogram: histogram(&rows, bins)?,
    })
}
