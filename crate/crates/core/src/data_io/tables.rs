//! CSV sidecars: target ground truth and prediction dumps.
//!
//! Both may start with `#` comment lines, which readers skip.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::actp::Label;
use crate::adapt::Prediction;
use crate::error::{Error, Result};

/// Ground-truth head index per target sample, `None` for target-private.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub rows: Vec<(u64, Option<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: u64,
    pub label: Label,
    pub uncertainty: f64,
}

impl PredictionRow {
    pub fn from_predictions(predictions: &[Prediction]) -> Vec<PredictionRow> {
        predictions
            .iter()
            .enumerate()
            .map(|(i, p)| PredictionRow {
                sample_id: i as u64,
                label: p.label,
                uncertainty: p.uncertainty,
            })
            .collect()
    }
}

/// Writes `# provenance` (if any) followed by the CSV body.
pub fn with_comment(provenance: Option<&str>, body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 64);
    if let Some(p) = provenance {
        for line in p.lines() {
            out.extend_from_slice(b"# ");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    out.extend(body);
    out
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str, line: usize) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::InvalidConfig(format!("line {line}: bad {what} {field:?}")))
}

impl GroundTruth {
    pub fn to_csv(&self, provenance: Option<&str>) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "label"])?;
        for (id, label) in &self.rows {
            let l = label.map_or(-1, |c| c as i64);
            w.write_record([id.to_string(), l.to_string()])?;
        }
        Ok(with_comment(provenance, w.into_inner().map_err(|e| e.into_error())?))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in reader(text).records().enumerate() {
            let rec = rec?;
            let id: u64 = parse(rec.get(0), "sample_id", i + 2)?;
            let label: i64 = parse(rec.get(1), "label", i + 2)?;
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(Error::InvalidConfig(format!("line {}: label {l}", i + 2))),
            };
            rows.push((id, label));
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>, provenance: Option<&str>) -> Result<()> {
        fs::write(path, self.to_csv(provenance)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

pub fn predictions_to_csv(rows: &[PredictionRow], provenance: Option<&str>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "label", "uncertainty"])?;
    for r in rows {
        w.write_record([r.sample_id.to_string(), r.label.to_string(), format!("{:.9}", r.uncertainty)])?;
    }
    Ok(with_comment(provenance, w.into_inner().map_err(|e| e.into_error())?))
}

pub fn predictions_from_csv(text: &str) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    for (i, rec) in reader(text).records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let sample_id = parse(rec.get(0), "sample_id", line)?;
        let label = match rec.get(1) {
            Some(l) if l.eq_ignore_ascii_case("unknown") => Label::Unknown,
            other => Label::Class(parse(other, "label", line)?),
        };
        let uncertainty: f64 = parse(rec.get(2), "uncertainty", line)?;
        if !(0.0..=1.0).contains(&uncertainty) {
            return Err(Error::InvalidConfig(format!("line {line}: uncertainty {uncertainty} outside [0, 1]")));
        }
        rows.push(PredictionRow {
            sample_id,
            label,
            uncertainty,
        });
    }
    Ok(rows)
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow], provenance: Option<&str>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&predictions_to_csv(rows, provenance)?)?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    predictions_from_csv(&fs::read_to_string(path)?)
}
