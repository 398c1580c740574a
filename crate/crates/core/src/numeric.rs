//! Dense vector and matrix primitives.
//!
//! Everything here works in `f64`. Features are expected to be unit-normalized
//! once at ingestion, after which cosine similarity is a plain dot product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Row-major matrix of features sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Builds a matrix from row vectors, all of which must share a dimension.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.dim == 0 {
            self.dim = row.len();
        }
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Picks the given rows, in order, into a new matrix.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Returns a copy with every row projected onto the unit sphere.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..out.rows {
            let n = l2_normalize(out.row(i))?;
            out.row_mut(i).copy_from_slice(&n);
        }
        Ok(out)
    }
}

/// Probability distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps a distribution, checking entries lie in [0, 1] and sum to 1.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|x| !(0.0..=1.0).contains(x)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange {
                what: "probability vector",
                detail: format!("entries must lie in [0,1] and sum to 1, got sum {sum}"),
            });
        }
        Ok(Self(p))
    }

    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        Self(p)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        softmax(logits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// First index of the maximum value.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Dot product of two pre-normalized vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(a, b))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / sum).collect())
}

/// H(target, predicted) with the prediction clamped at [`PROB_EPS`].
pub fn cross_entropy(target: &ProbVector, predicted: &ProbVector) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: predicted.len(),
        });
    }
    Ok(target
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| -t * p.max(PROB_EPS).ln())
        .sum())
}

pub fn entropy(p: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .filter(|x| **x > 0.0)
        .map(|x| -x * x.max(PROB_EPS).ln())
        .sum()
}

/// Entropy divided by ln C, in [0, 1]. Degenerate one-class input maps to 0.
pub fn normalized_entropy(p: &ProbVector) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    (entropy(p) / (p.len() as f64).ln()).clamp(0.0, 1.0)
}
