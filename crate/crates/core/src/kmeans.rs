//! Lloyd's k-means with greedy k-means++ seeding.
//!
//! Fits are deterministic for a fixed `(points, k, seed)` and independent of
//! input order: points are processed in lexicographic order internally and
//! the labels are mapped back afterwards. Distances are squared Euclidean;
//! ties between centroids go to the lowest index.

use alloc::{collections::BTreeMap, string::String, vec, vec::Vec};
use core::cmp::Ordering;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Independent restarts; the lowest-inertia fit wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

/// Index of the nearest centroid and its squared distance.
pub fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest-centroid lookup with dimension checking.
pub fn assign(vector: &[f64], centroids: &[Vec<f64>]) -> Result<usize> {
    let dim = centroids.first().map(Vec::len).ok_or(Error::ZeroClusters)?;
    if vector.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: vector.len(),
        });
    }
    if let Some(pos) = vector.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(pos));
    }
    Ok(nearest(centroids, vector).0)
}

/// Sum of squared distances from each point to its labeled centroid.
pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| squared_distance(p, &centroids[l]))
        .sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn validate(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if let Some(pos) = p.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
    }
    Ok(dim)
}

pub fn fit(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    validate(points)?;
    let k = params.k;
    if k == 0 {
        return Err(Error::ZeroClusters);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_slice()).collect();
    let distinct = 1 + sorted
        .windows(2)
        .filter(|w| lex_cmp(w[0], w[1]) != Ordering::Equal)
        .count();
    if k > distinct {
        return Err(Error::TooManyClusters { k, distinct });
    }

    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<Run> = None;
    for _ in 0..params.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let run = lloyd(&sorted, k, params, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    let mut labels = vec![0; points.len()];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = best.labels[pos];
    }
    Ok(KMeansFit {
        k,
        centroids: best.centroids,
        labels,
        inertia: best.inertia,
        seed: params.seed,
        iterations_run: best.iterations,
        inertia_trace: best.trace,
    })
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + libm::log(k as f64) as usize;
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].to_vec()];
    let mut closest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, points[first]))
        .collect();
    let mut potential: f64 = closest.iter().sum();

    while centroids.len() < k {
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.random::<f64>() * potential;
            let mut acc = 0.0;
            let mut cand = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > target {
                    cand = i;
                    break;
                }
            }
            let dists: Vec<f64> = closest
                .iter()
                .zip(points)
                .map(|(&c, p)| c.min(squared_distance(p, points[cand])))
                .collect();
            let pot: f64 = dists.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.1) {
                best = Some((cand, pot, dists));
            }
        }
        let (cand, pot, dists) = best.expect("at least one trial");
        centroids.push(points[cand].to_vec());
        closest = dists;
        potential = pot;
    }
    centroids
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    for (i, p) in points.iter().enumerate() {
        let (l, d) = nearest(centroids, p);
        labels[i] = l;
        dists[i] = d;
    }
}

/// Moves the centroid of every empty cluster onto the point farthest from its
/// own centroid, then reassigns.
fn repair_empty(
    points: &[&[f64]],
    centroids: &mut [Vec<f64>],
    labels: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.len();
    for _ in 0..2 * k {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = 0;
        for (i, &d) in dists.iter().enumerate() {
            if d > dists[far] {
                far = i;
            }
        }
        centroids[empty] = points[far].to_vec();
        assign_all(points, centroids, labels, dists);
    }
}

fn lloyd(points: &[&[f64]], k: usize, params: &KMeansParams, rng: &mut ChaCha8Rng) -> Run {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        assign_all(points, &centroids, &mut labels, &mut dists);
        repair_empty(points, &mut centroids, &mut labels, &mut dists);
        push_trace(&mut trace, dists.iter().sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            shift = shift.max(libm::sqrt(squared_distance(c, &mean)));
            *c = mean;
        }
        iterations += 1;
        if shift < params.tol {
            break;
        }
    }

    assign_all(points, &centroids, &mut labels, &mut dists);
    repair_empty(points, &mut centroids, &mut labels, &mut dists);
    let inertia = dists.iter().sum();
    push_trace(&mut trace, inertia);
    Run {
        centroids,
        labels,
        inertia,
        iterations,
        trace,
    }
}

fn push_trace(trace: &mut Vec<f64>, value: f64) {
    if let Some(&prev) = trace.last() {
        debug_assert!(
            value <= prev + 1e-9 * prev.abs().max(1.0),
            "inertia increased from {prev} to {value}"
        );
    }
    trace.push(value);
}

/// A fitted clustering keyed by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

impl ClusterModel {
    /// Fits `vectors[i]` belonging to `ids[i]`.
    pub fn fit(ids: &[String], vectors: &[Vec<f64>], params: &KMeansParams) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: vectors.len(),
            });
        }
        let fit = fit(vectors, params)?;
        let mut assignments = BTreeMap::new();
        for (id, &l) in ids.iter().zip(&fit.labels) {
            if assignments.insert(id.clone(), l).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(ClusterModel {
            k: fit.k,
            centroids: fit.centroids,
            assignments,
            inertia: fit.inertia,
            seed: fit.seed,
            iterations_run: fit.iterations_run,
        })
    }

    pub fn assign(&self, vector: &[f64]) -> Result<usize> {
        assign(vector, &self.centroids)
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Cluster sizes, indexed by cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in self.assignments.values() {
            sizes[l] += 1;
        }
        sizes
    }
}
