//! K-means over target features, internal validity indices, and selection of
//! the cluster count from a candidate list scaled by the source class count.
//!
//! All distances are Euclidean. On unit-normalized features this is monotone
//! in cosine distance.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{euclidean, squared_distance, FeatureMatrix};
use crate::rng;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// Score returned by Calinski-Harabasz when within-cluster dispersion vanishes.
pub const CH_SENTINEL: f64 = 1e18;

// RMS within-cluster distance at or below this counts as zero dispersion.
const ZERO_DISPERSION_RMS: f64 = 1e-12;
const COINCIDENT_CENTROIDS: f64 = 1e-12;

thread_local! {
    static KMEANS_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`kmeans`] invocations made on the current thread.
pub fn kmeans_call_count() -> u64 {
    KMEANS_CALLS.with(Cell::get)
}

/// Result of one K-means run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: FeatureMatrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each Lloyd update, in order.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iters` updates or as soon as an assignment pass changes
/// nothing. A cluster left empty by an assignment pass takes over the point
/// farthest from its own centroid, so every cluster ends with a member.
pub fn kmeans(features: &FeatureMatrix, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    KMEANS_CALLS.with(|c| c.set(c.get() + 1));
    let n = features.rows();
    if k < 2 {
        return Err(Error::TooFewClusters { k, min: 2 });
    }
    if k > n {
        return Err(Error::MoreClustersThanPoints { k, n });
    }
    if max_iters == 0 {
        return Err(Error::OutOfRange {
            what: "max_iters",
            detail: "must be at least 1".into(),
        });
    }

    let mut rng = rng::stream(seed, rng::purpose::KMEANS);
    let mut centroids = plus_plus_init(features, k, &mut rng)?;
    let dim = features.dim();

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations_run = 0;

    for _ in 0..max_iters {
        let mut changed = false;
        for (i, x) in features.iter_rows().enumerate() {
            let best = nearest(&centroids, x).0;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        changed |= repair_empty(features, &mut centroids, &mut assignments);
        if !changed {
            break;
        }

        centroids = cluster_means(features, &assignments, k, dim);
        let inertia = features
            .iter_rows()
            .zip(&assignments)
            .map(|(x, &a)| squared_distance(x, centroids.row(a)))
            .sum();
        history.push(inertia);
        iterations_run += 1;
    }

    Ok(ClusterModel {
        centroids,
        assignments,
        inertia: *history.last().expect("at least one Lloyd update runs"),
        iterations_run,
        inertia_history: history,
    })
}

fn plus_plus_init(features: &FeatureMatrix, k: usize, rng: &mut impl Rng) -> Result<FeatureMatrix> {
    let n = features.rows();
    let mut centroids = FeatureMatrix::zeros(0, features.dim());
    centroids.push_row(features.row(rng.random_range(0..n)))?;

    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|x| squared_distance(x, centroids.row(0)))
        .collect();
    while centroids.rows() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::TooFewDistinctPoints { k });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("positive total weight");
        centroids.push_row(features.row(pick))?;
        let c = centroids.rows() - 1;
        for (i, x) in features.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, centroids.row(c)));
        }
    }
    Ok(centroids)
}

/// Index and squared distance of the closest centroid; ties go to the lowest index.
fn nearest(centroids: &FeatureMatrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn repair_empty(features: &FeatureMatrix, centroids: &mut FeatureMatrix, assignments: &mut [usize]) -> bool {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut repaired = false;
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, x) in features.iter_rows().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = squared_distance(x, centroids.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n leaves a cluster with spare members");
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        centroids.row_mut(empty).copy_from_slice(features.row(i));
        repaired = true;
    }
    repaired
}

fn cluster_means(features: &FeatureMatrix, labels: &[usize], k: usize, dim: usize) -> FeatureMatrix {
    let mut sums = FeatureMatrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (x, &a) in features.iter_rows().zip(labels) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(x) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = count as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= inv);
        }
    }
    sums
}

fn check_partition(features: &FeatureMatrix, labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if labels.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            features.rows()
        )));
    }
    if k < 2 {
        return Err(Error::TooFewClusters { k, min: 2 });
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::OutOfRange {
                what: "cluster label",
                detail: format!("{l} >= k={k}"),
            });
        }
        sizes[l] += 1;
    }
    if let Some(c) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster(c));
    }
    Ok(sizes)
}

/// Mean silhouette coefficient of the model's partition.
pub fn silhouette_mean(features: &FeatureMatrix, model: &ClusterModel) -> Result<f64> {
    silhouette_of_labels(features, &model.assignments, model.k())
}

/// Mean silhouette over an arbitrary labelling into `k` non-empty clusters.
///
/// Points in singleton clusters score 0.
pub fn silhouette_of_labels(features: &FeatureMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let sizes = check_partition(features, labels, k)?;
    let n = features.rows();
    // sums[i * k + c]: total distance from point i to members of cluster c
    let mut sums = vec![0.0; n * k];
    for i in 0..n {
        let xi = features.row(i);
        for j in (i + 1)..n {
            let d = euclidean(xi, features.row(j));
            sums[i * k + labels[j]] += d;
            sums[j * k + labels[i]] += d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[i * k + own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[i * k + c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

pub fn calinski_harabasz(features: &FeatureMatrix, model: &ClusterModel) -> Result<f64> {
    calinski_harabasz_of_labels(features, &model.assignments, model.k())
}

/// Between-cluster over within-cluster dispersion, each divided by its degrees
/// of freedom. Higher is better.
pub fn calinski_harabasz_of_labels(features: &FeatureMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let sizes = check_partition(features, labels, k)?;
    let n = features.rows();
    if k >= n {
        return Err(Error::OutOfRange {
            what: "k",
            detail: format!("Calinski-Harabasz needs k < n, got k={k}, n={n}"),
        });
    }
    let dim = features.dim();
    let means = cluster_means(features, labels, k, dim);
    let mut overall = vec![0.0; dim];
    for x in features.iter_rows() {
        overall.iter_mut().zip(x).for_each(|(o, v)| *o += v);
    }
    overall.iter_mut().for_each(|o| *o /= n as f64);

    let between: f64 = (0..k)
        .map(|c| sizes[c] as f64 * squared_distance(means.row(c), &overall))
        .sum();
    let within: f64 = features
        .iter_rows()
        .zip(labels)
        .map(|(x, &l)| squared_distance(x, means.row(l)))
        .sum();
    if within / n as f64 <= ZERO_DISPERSION_RMS * ZERO_DISPERSION_RMS {
        return Ok(CH_SENTINEL);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

pub fn davies_bouldin(features: &FeatureMatrix, model: &ClusterModel) -> Result<f64> {
    davies_bouldin_of_labels(features, &model.assignments, model.k())
}

/// Mean over clusters of the worst (σ_i + σ_j) / d(c_i, c_j) ratio, with σ the
/// mean member-to-centroid distance. Lower is better.
pub fn davies_bouldin_of_labels(features: &FeatureMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let sizes = check_partition(features, labels, k)?;
    let means = cluster_means(features, labels, k, features.dim());
    let mut scatter = vec![0.0; k];
    for (x, &l) in features.iter_rows().zip(labels) {
        scatter[l] += euclidean(x, means.row(l));
    }
    for c in 0..k {
        scatter[c] /= sizes[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = euclidean(means.row(i), means.row(j));
            if d <= COINCIDENT_CENTROIDS {
                return Err(Error::DegenerateCentroids(i.min(j), i.max(j)));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMethod {
    Silhouette,
    CalinskiHarabasz,
    DaviesBouldin,
}

impl KMethod {
    pub fn lower_is_better(self) -> bool {
        matches!(self, KMethod::DaviesBouldin)
    }

    pub fn score(self, features: &FeatureMatrix, model: &ClusterModel) -> Result<f64> {
        match self {
            KMethod::Silhouette => silhouette_mean(features, model),
            KMethod::CalinskiHarabasz => calinski_harabasz(features, model),
            KMethod::DaviesBouldin => davies_bouldin(features, model),
        }
    }
}

impl fmt::Display for KMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KMethod::Silhouette => "silhouette",
            KMethod::CalinskiHarabasz => "ch",
            KMethod::DaviesBouldin => "db",
        })
    }
}

impl FromStr for KMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silhouette" => Ok(KMethod::Silhouette),
            "ch" | "calinski_harabasz" | "calinski-harabasz" => Ok(KMethod::CalinskiHarabasz),
            "db" | "davies_bouldin" | "davies-bouldin" => Ok(KMethod::DaviesBouldin),
            other => Err(Error::InvalidConfig(format!(
                "unknown K selection method {other:?} (expected silhouette, ch or db)"
            ))),
        }
    }
}

/// Ordered, de-duplicated cluster counts to try.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KCandidateSet {
    pub source_class_count: usize,
    pub candidates: Vec<usize>,
}

impl KCandidateSet {
    /// `[|C^s|/3, |C^s|/2, |C^s|, 2|C^s|, 3|C^s|]`, rounded to nearest
    /// (halves away from zero), floored at 2, duplicates dropped.
    pub fn from_source_classes(source_class_count: usize) -> Self {
        let cs = source_class_count as f64;
        let mut candidates: Vec<usize> = [cs / 3.0, cs / 2.0, cs, 2.0 * cs, 3.0 * cs]
            .iter()
            .map(|&c| (c.round() as usize).max(2))
            .collect();
        candidates.dedup();
        Self {
            source_class_count,
            candidates,
        }
    }

    /// A single forced cluster count.
    pub fn fixed(k: usize) -> Self {
        Self {
            source_class_count: 0,
            candidates: vec![k],
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub k: usize,
    /// `None` when K-means or the index could not be computed for this K.
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub k: usize,
    pub model: ClusterModel,
    pub method: KMethod,
    pub scores: Vec<CandidateScore>,
}

/// Clusters once per candidate and keeps the best-scoring K. Ties go to the
/// smaller K. Candidates that cannot be clustered are scored `None`.
pub fn select_k(
    features: &FeatureMatrix,
    candidates: &KCandidateSet,
    method: KMethod,
    seed: u64,
) -> Result<KSelection> {
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64, ClusterModel)> = None;
    for &k in &candidates.candidates {
        let scored = kmeans(features, k, DEFAULT_MAX_ITERS, seed)
            .and_then(|m| method.score(features, &m).map(|s| (m, s)));
        match scored {
            Ok((model, s)) if s.is_finite() => {
                scores.push(CandidateScore { k, score: Some(s) });
                let better = match &best {
                    None => true,
                    Some((_, b, _)) if method.lower_is_better() => s < *b,
                    Some((_, b, _)) => s > *b,
                };
                if better {
                    best = Some((k, s, model));
                }
            }
            _ => scores.push(CandidateScore { k, score: None }),
        }
    }
    let (k, _, model) = best.ok_or(Error::NoValidCandidate)?;
    Ok(KSelection {
        k,
        model,
        method,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(points.len(), 1, points.to_vec()).unwrap()
    }

    fn model_for(labels: Vec<usize>, k: usize, f: &FeatureMatrix) -> ClusterModel {
        ClusterModel {
            centroids: cluster_means(f, &labels, k, f.dim()),
            assignments: labels,
            inertia: 0.0,
            iterations_run: 0,
            inertia_history: vec![],
        }
    }

    #[test]
    fn kmeans_two_pairs() {
        let f = line(&[0.0, 1.0, 10.0, 11.0]);
        for seed in 0..10 {
            let m = kmeans(&f, 2, 100, seed).unwrap();
            let mut c: Vec<f64> = m.centroids.as_slice().to_vec();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![0.5, 10.5]);
            assert!((m.inertia - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_each_point_own_cluster() {
        let f = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
        let m = kmeans(&f, 4, 100, 3).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let f = line(&[0.1, 0.3, 2.0, 2.2, 5.0, 5.5, 9.0, 9.1, 9.3]);
        let a = kmeans(&f, 3, 100, 11).unwrap();
        let b = kmeans(&f, 3, 100, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_errors() {
        let f = line(&[0.0, 1.0]);
        assert!(matches!(kmeans(&f, 3, 100, 0), Err(Error::MoreClustersThanPoints { .. })));
        assert!(matches!(kmeans(&f, 1, 100, 0), Err(Error::TooFewClusters { .. })));
        let same = line(&[2.0, 2.0, 2.0]);
        assert!(matches!(kmeans(&same, 2, 100, 0), Err(Error::TooFewDistinctPoints { .. })));
    }

    #[test]
    fn silhouette_two_tight_pairs() {
        let f = line(&[0.0, 0.1, 10.0, 10.1]);
        let m = model_for(vec![0, 0, 1, 1], 2, &f);
        let s = silhouette_mean(&f, &m).unwrap();
        assert!((s - 0.990).abs() < 1e-3, "{s}");
    }

    #[test]
    fn silhouette_singletons_score_zero() {
        // one singleton (score 0) and one pair
        let f = line(&[0.0, 5.0, 5.2]);
        let s = silhouette_of_labels(&f, &[0, 1, 1], 2).unwrap();
        let pair = 1.0 - 0.2 / 5.0; // a = 0.2, b = 5.0 for the point at 5.0
        let pair2 = 1.0 - 0.2 / 5.2;
        assert!((s - (pair + pair2) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_requires_two_clusters() {
        let f = line(&[0.0, 1.0]);
        assert!(silhouette_of_labels(&f, &[0, 0], 1).is_err());
    }

    #[test]
    fn davies_bouldin_two_tight_pairs() {
        // scatter 0.05 each, centroids 0.05 and 10.05
        let f = line(&[0.0, 0.1, 10.0, 10.1]);
        let m = model_for(vec![0, 0, 1, 1], 2, &f);
        let db = davies_bouldin(&f, &m).unwrap();
        assert!((db - 0.01).abs() < 1e-12, "{db}");
    }

    #[test]
    fn davies_bouldin_tight_and_degenerate() {
        let f = line(&[1.0, 1.0, 4.0, 4.0]);
        assert_eq!(davies_bouldin_of_labels(&f, &[0, 0, 1, 1], 2).unwrap(), 0.0);
        let g = line(&[0.0, 2.0, 1.0, 1.0]);
        assert!(matches!(
            davies_bouldin_of_labels(&g, &[0, 0, 1, 1], 2),
            Err(Error::DegenerateCentroids(0, 1))
        ));
    }

    #[test]
    fn calinski_harabasz_sentinel() {
        let f = line(&[0.1, 0.1, 0.1, 7.3, 7.3]);
        assert_eq!(calinski_harabasz_of_labels(&f, &[0, 0, 0, 1, 1], 2).unwrap(), CH_SENTINEL);
    }

    #[test]
    fn calinski_harabasz_prefers_true_split() {
        let f = line(&[0.0, 0.1, 10.0, 10.1]);
        let good = calinski_harabasz_of_labels(&f, &[0, 0, 1, 1], 2).unwrap();
        for labels in [[0, 1, 0, 1], [0, 1, 1, 0], [0, 0, 0, 1], [0, 1, 1, 1]] {
            let other = calinski_harabasz_of_labels(&f, &labels, 2).unwrap();
            assert!(good > 100.0 * other, "{good} vs {other}");
        }
    }

    #[test]
    fn candidate_rounding() {
        assert_eq!(KCandidateSet::from_source_classes(9).candidates, vec![3, 5, 9, 18, 27]);
        assert_eq!(KCandidateSet::from_source_classes(6).candidates, vec![2, 3, 6, 12, 18]);
        assert_eq!(KCandidateSet::from_source_classes(15).candidates, vec![5, 8, 15, 30, 45]);
        assert_eq!(KCandidateSet::from_source_classes(2).candidates, vec![2, 4, 6]);
    }

    #[test]
    fn select_k_fails_on_identical_points() {
        let f = line(&[3.0; 18]);
        let c = KCandidateSet::from_source_classes(6);
        assert!(matches!(
            select_k(&f, &c, KMethod::Silhouette, 0),
            Err(Error::NoValidCandidate)
        ));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("db".parse::<KMethod>().unwrap(), KMethod::DaviesBouldin);
        assert_eq!("ch".parse::<KMethod>().unwrap(), KMethod::CalinskiHarabasz);
        assert!("gap".parse::<KMethod>().is_err());
        assert!(KMethod::DaviesBouldin.lower_is_better());
    }
}
